//! Two-stage training procedure, fine-tuning with planner-synthesized
//! segments, checkpoint plumbing, and evaluation entry points.
//!
//! Stage 1 trains the tokenizer on observations and then the world part on
//! segments; stage 2 freezes the tokenizer and jointly optimizes the
//! world-action model. All randomness flows through named streams that are
//! persisted in checkpoints, so (seed, config, dataset) determine the whole
//! run bit-exactly in single-threaded mode.

use crate::backbone::{
    imagine_step, Backbone, Decode, HeadRequest, LearnedWorldModel, Mode, TargetHeadState,
    TokenContext, TokenSegment,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, Counters};
use crate::config::Config;
use crate::dataset::{
    obs_to_f64, sample_observation_batch, sample_segment_batch, Dataset, RawSegment,
};
use crate::envs::EnvSpec;
use crate::error::{Result, WamError};
use crate::evaluation::{
    measure_reference_scores, normalized_score, rollout_policy, EvalPolicy, ScoreRow,
};
use crate::losses::{
    atom_support, joint_loss_batch, target_sync, world_loss_batch, JointLossParts,
};
use crate::numerics::optim::{adamw_update, clip_global_norm, OptimizerState};
use crate::numerics::tape::Tape;
use crate::planner::{beam_search_plan, PlanConfig};
use crate::rng::Rng64;
use crate::tokenizer::Tokenizer;
use std::path::Path;

/// Telemetry sink: one CSV row per training step.
pub struct TrainLog {
    pub rows: Vec<String>,
    path: Option<std::path::PathBuf>,
}

impl TrainLog {
    pub fn new(path: Option<std::path::PathBuf>) -> Result<TrainLog> {
        let header = "step,stage,world,cql,kl,total,grad_norm".to_string();
        if let Some(p) = &path {
            std::fs::write(p, format!("{}\n", header))?;
        }
        Ok(TrainLog {
            rows: vec![header],
            path,
        })
    }

    pub fn log(
        &mut self,
        step: u64,
        stage: &str,
        world: f64,
        cql: f64,
        kl: f64,
        total: f64,
        grad_norm: f64,
    ) -> Result<()> {
        let row = format!(
            "{},{},{},{},{},{},{}",
            step, stage, world, cql, kl, total, grad_norm
        );
        if let Some(p) = &self.path {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new().append(true).open(p)?;
            writeln!(f, "{}", row)?;
        }
        self.rows.push(row);
        Ok(())
    }
}

/// Per-transition token cache, rebuilt whenever the tokenizer is frozen.
struct TokenCache {
    tokens: Vec<Vec<Vec<u16>>>,
}

impl TokenCache {
    fn build(tokenizer: &Tokenizer, data: &Dataset) -> Result<TokenCache> {
        let mut tokens = Vec::with_capacity(data.tasks.len());
        for task in &data.tasks {
            let mut per_task = Vec::with_capacity(task.transitions.len());
            for t in &task.transitions {
                per_task.push(tokenizer.encode_observation(&obs_to_f64(&t.obs))?);
            }
            tokens.push(per_task);
        }
        Ok(TokenCache { tokens })
    }
}

pub struct Trainer {
    pub cfg: Config,
    pub tokenizer: Tokenizer,
    pub model: Backbone,
    pub target: TargetHeadState,
    pub tok_opt: OptimizerState,
    pub model_opt: OptimizerState,
    pub counters: Counters,
    pub support: Vec<f64>,
    data_rng: Rng64,
    dropout_rng: Rng64,
    synth_rng: Rng64,
    token_cache: Option<TokenCache>,
    /// Valid-action masks per model task row.
    task_masks: Vec<Vec<bool>>,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Trainer> {
        cfg.model.validate()?;
        cfg.train.precision()?;
        let seed = cfg.train.seed;
        let mut tok_rng = Rng64::stream(seed, 1);
        let mut model_rng = Rng64::stream(seed, 2);
        let tokenizer = Tokenizer::new(&cfg.model, &mut tok_rng)?;
        let model = Backbone::new(&cfg.model, &mut model_rng)?;
        let target = model.snapshot_q_head(0);
        let support = atom_support(cfg.model.v_min, cfg.model.v_max, cfg.model.atoms)?;
        let tok_opt = OptimizerState::new(cfg.train.lr_tokenizer, 0.0);
        let model_opt = OptimizerState::new(cfg.train.lr_stage1, cfg.train.weight_decay);
        let task_masks = vec![vec![true; cfg.model.a_max]; cfg.model.num_tasks];
        Ok(Trainer {
            cfg: cfg.clone(),
            tokenizer,
            model,
            target,
            tok_opt,
            model_opt,
            counters: Counters::default(),
            support,
            data_rng: Rng64::stream(seed, 3),
            dropout_rng: Rng64::stream(seed, 4),
            synth_rng: Rng64::stream(seed, 5),
            token_cache: None,
            task_masks,
        })
    }

    /// Map dataset task order onto model task-embedding rows (pretraining
    /// uses rows 0..n in dataset order) and record valid-action masks.
    fn bind_tasks(&mut self, data: &Dataset, rows: &[usize]) -> Result<()> {
        if rows.len() != data.tasks.len() {
            return Err(WamError::contract("task row mapping length mismatch"));
        }
        for (task, &row) in data.tasks.iter().zip(rows) {
            if row >= self.model.cfg.num_tasks {
                return Err(WamError::contract(format!(
                    "task row {} out of range ({} tasks)",
                    row, self.model.cfg.num_tasks
                )));
            }
            self.task_masks[row] = task.spec.task.valid_mask().to_vec();
        }
        Ok(())
    }

    fn tape(&self) -> Tape {
        Tape::new().with_precision(self.cfg.train.precision().expect("validated"))
    }

    /// Tokenize a sampled raw window into a training segment using the
    /// cache when available.
    fn tokenize_segment(&self, raw: &RawSegment, row: usize) -> Result<TokenSegment> {
        let k = self.cfg.model.tokens_per_frame;
        let l = raw.len();
        let mut frames = Vec::with_capacity(l);
        for t in 0..l {
            if !raw.valid[t] {
                frames.push(vec![0u16; k]);
                continue;
            }
            let tokens = match (&self.token_cache, raw.indices[t]) {
                (Some(cache), Some(idx)) => cache.tokens[raw.task_index][idx].clone(),
                _ => self
                    .tokenizer
                    .encode_observation(&obs_to_f64(&raw.obs[t]))?,
            };
            frames.push(tokens);
        }
        Ok(TokenSegment {
            task: row,
            frames,
            actions: raw.actions.clone(),
            ternary: raw.ternary.clone(),
            done: raw.done.clone(),
            truncated: raw.truncated.clone(),
            valid: raw.valid.clone(),
            imagined: raw.imagined.clone(),
            tokens_per_frame: k,
        })
    }

    fn sample_token_batch(
        &mut self,
        data: &Dataset,
        rows: &[usize],
        batch: usize,
    ) -> Result<Vec<TokenSegment>> {
        let raws = sample_segment_batch(
            data,
            self.cfg.model.seq_timesteps,
            batch,
            &mut self.data_rng,
        )?;
        raws.iter()
            .map(|r| self.tokenize_segment(r, rows[r.task_index]))
            .collect()
    }

    fn optimize(
        &mut self,
        tape: &mut Tape,
        loss: crate::numerics::tape::Var,
        which: Which,
    ) -> Result<f64> {
        let mut grads = tape.backward(loss)?;
        let norm = clip_global_norm(&mut grads, self.cfg.train.grad_clip)?;
        match which {
            Which::Tokenizer => adamw_update(&mut self.tokenizer.params, &grads, &mut self.tok_opt)?,
            Which::Model => adamw_update(&mut self.model.params, &grads, &mut self.model_opt)?,
        }
        Ok(norm)
    }

    // ── Stage 1 ─────────────────────────────────────────────────────────

    /// Tokenizer phase followed by world-part training for the configured
    /// budgets. Both phases resume from the stored counters. The Q-head is
    /// untouched throughout.
    pub fn run_stage1(&mut self, data: &Dataset, log: &mut TrainLog) -> Result<()> {
        let rows: Vec<usize> = (0..data.tasks.len()).collect();
        self.bind_tasks(data, &rows)?;
        // Phase A: tokenizer on observation batches.
        while self.counters.tokenizer_steps < self.cfg.train.tokenizer_steps {
            let batch = sample_observation_batch(
                data,
                self.cfg.train.tokenizer_batch,
                &mut self.data_rng,
            )?;
            if !self.tokenizer.data_initialized {
                self.tokenizer.data_init_codebook(&batch, &mut self.synth_rng)?;
            }
            let step = self.counters.tokenizer_steps;
            let mut tape = self.tape();
            let (loss, parts) = self.tokenizer.loss(&mut tape, &batch, step)?;
            let norm = self.optimize(&mut tape, loss, Which::Tokenizer)?;
            self.tokenizer.reseed_dead_codes(
                step,
                self.cfg.train.dead_code_steps,
                &batch,
                &mut self.synth_rng,
            )?;
            self.counters.tokenizer_steps += 1;
            log.log(
                self.counters.tokenizer_steps,
                "tokenizer",
                parts.recon_l1,
                parts.codebook,
                parts.commit,
                parts.total(),
                norm,
            )?;
        }
        // Phase B: world-part training on cached tokens.
        if self.token_cache.is_none() {
            self.token_cache = Some(TokenCache::build(&self.tokenizer, data)?);
        }
        self.model_opt.lr = self.cfg.train.lr_stage1;
        while self.counters.m1_steps < self.cfg.train.m1_steps {
            let segs = self.sample_token_batch(data, &rows, self.cfg.train.batch_size)?;
            let mut tape = self.tape();
            let mut drng = self.dropout_rng.clone();
            let (loss, value, _acc) =
                world_loss_batch(&mut tape, &self.model, &segs, Mode::Train, Some(&mut drng))?;
            self.dropout_rng = drng;
            let norm = self.optimize(&mut tape, loss, Which::Model)?;
            self.counters.m1_steps += 1;
            log.log(
                self.counters.m1_steps,
                "world",
                value,
                0.0,
                0.0,
                value,
                norm,
            )?;
        }
        Ok(())
    }

    // ── Stage 2 ─────────────────────────────────────────────────────────

    /// Jointly optimize the world-action model with the tokenizer frozen.
    pub fn run_stage2(&mut self, data: &Dataset, log: &mut TrainLog) -> Result<()> {
        let budget = self.cfg.train.m2_steps;
        self.run_stage2_partial(data, log, budget)
    }

    /// Run at most `limit` stage-2 steps (resumable).
    pub fn run_stage2_partial(
        &mut self,
        data: &Dataset,
        log: &mut TrainLog,
        limit: u64,
    ) -> Result<()> {
        let rows: Vec<usize> = (0..data.tasks.len()).collect();
        self.bind_tasks(data, &rows)?;
        if self.token_cache.is_none() {
            self.token_cache = Some(TokenCache::build(&self.tokenizer, data)?);
        }
        let frozen = self.tokenizer.params.clone();
        self.model_opt.lr = self.cfg.train.lr_stage2;
        let end = (self.counters.m2_steps + limit).min(self.cfg.train.m2_steps);
        while self.counters.m2_steps < end {
            let step = self.counters.m2_steps;
            target_sync(
                &self.model,
                &mut self.target,
                step,
                self.cfg.train.target_sync_every,
            );
            let segs = self.sample_token_batch(data, &rows, self.cfg.train.batch_size)?;
            let (parts, norm) = self.joint_step(&segs)?;
            self.counters.m2_steps += 1;
            log.log(
                self.counters.m2_steps,
                "joint",
                parts.world,
                parts.cql,
                parts.kl,
                parts.total,
                norm,
            )?;
        }
        if !self.tokenizer.params.values_equal(&frozen) {
            return Err(WamError::contract(
                "tokenizer parameters changed during stage 2",
            ));
        }
        Ok(())
    }

    fn joint_step(&mut self, segs: &[TokenSegment]) -> Result<(JointLossParts, f64)> {
        let mut tape = self.tape();
        let mut drng = self.dropout_rng.clone();
        let (loss, parts) = joint_loss_batch(
            &mut tape,
            &self.model,
            segs,
            &self.target,
            &self.support,
            &self.cfg.train,
            &self.task_masks,
            Mode::Train,
            Some(&mut drng),
        )?;
        self.dropout_rng = drng;
        let norm = self.optimize(&mut tape, loss, Which::Model)?;
        Ok((parts, norm))
    }

    // ── Fine-tuning ─────────────────────────────────────────────────────

    /// Fine-tune on a single-task dataset: sample real prefixes, extend them
    /// with planner-chosen imagined steps, and optimize the joint loss.
    /// Registers a fresh task-embedding row when `fresh_task` is set.
    pub fn run_finetune(
        &mut self,
        data: &Dataset,
        fresh_task: bool,
        log: &mut TrainLog,
    ) -> Result<usize> {
        if data.tasks.len() != 1 {
            return Err(WamError::contract("fine-tuning expects a single-task dataset"));
        }
        let row = if fresh_task {
            let row = self.model.register_task();
            self.cfg.model.num_tasks = self.model.cfg.num_tasks;
            self.task_masks.push(vec![true; self.cfg.model.a_max]);
            row
        } else {
            self.model.cfg.num_tasks - 1
        };
        self.task_masks[row] = data.tasks[0].spec.task.valid_mask().to_vec();
        self.token_cache = Some(TokenCache::build(&self.tokenizer, data)?);
        self.model_opt.reset_moments();
        self.model_opt.lr = self.cfg.train.finetune.lr;

        let ft = self.cfg.train.finetune.clone();
        let mut pool: Vec<TokenSegment> = Vec::new();
        while self.counters.finetune_steps < ft.steps {
            let step = self.counters.finetune_steps;
            if step % ft.refresh_every == 0 || pool.is_empty() {
                pool = self.synthesize_pool(data, row, &ft)?;
            }
            target_sync(
                &self.model,
                &mut self.target,
                step,
                self.cfg.train.target_sync_every,
            );
            let mut batch = Vec::with_capacity(ft.batch_size);
            for _ in 0..ft.batch_size {
                batch.push(pool[self.data_rng.below(pool.len())].clone());
            }
            let (parts, norm) = self.joint_step(&batch)?;
            self.counters.finetune_steps += 1;
            log.log(
                self.counters.finetune_steps,
                "finetune",
                parts.world,
                parts.cql,
                parts.kl,
                parts.total,
                norm,
            )?;
        }
        Ok(row)
    }

    /// Build planner-synthesized segments: a real prefix of up to
    /// `real_prefix` steps extended with imagined steps up to the segment
    /// length, actions chosen by beam search (H, K from the config).
    pub fn synthesize_pool(
        &mut self,
        data: &Dataset,
        row: usize,
        ft: &crate::config::FinetuneConfig,
    ) -> Result<Vec<TokenSegment>> {
        let l = self.cfg.model.seq_timesteps;
        let k = self.cfg.model.tokens_per_frame;
        let n_imagined = l - ft.real_prefix;
        let valid_mask = self.task_masks[row].clone();
        let plan_cfg = PlanConfig::new(
            ft.plan_h,
            ft.plan_k,
            self.cfg.train.gamma,
            valid_mask.clone(),
        )?;
        let mut pool = Vec::with_capacity(ft.pool_size);
        let mut guard = 0usize;
        while pool.len() < ft.pool_size {
            guard += 1;
            if guard > ft.pool_size * 20 {
                return Err(WamError::contract(
                    "could not sample enough non-terminal prefixes",
                ));
            }
            let raw = sample_segment_batch(data, ft.real_prefix, 1, &mut self.data_rng)?
                .pop()
                .unwrap();
            // The prefix must not end an episode; imagined steps follow it.
            if raw.done.iter().any(|&d| d) {
                continue;
            }
            let prefix = self.tokenize_segment(&raw, row)?;
            // Build the imagination context from the real prefix.
            let mut ctx = TokenContext::new(row, l, k);
            for t in 0..prefix.n_timesteps() {
                if !prefix.valid[t] {
                    continue;
                }
                ctx.push_frame(prefix.frames[t].clone())?;
                ctx.push_action(prefix.actions[t])?;
            }
            // Decode the frame after the last real action, then alternate
            // plan / imagine.
            let first_frame = decode_next_frame(&self.model, &mut ctx)?;
            let mut frames = vec![first_frame];
            let mut actions = Vec::new();
            let mut ternary = Vec::new();
            let mut dones = Vec::new();
            let mut cur = ctx;
            for _ in 0..n_imagined {
                let action = {
                    let mut wm = LearnedWorldModel {
                        model: &self.model,
                        support: self.support.clone(),
                    };
                    beam_search_plan(&cur, &plan_cfg, &mut wm)?.0
                };
                let step = imagine_step(&self.model, &cur, action as u8, Decode::Greedy)?;
                actions.push(action as u8);
                ternary.push(step.reward_class);
                dones.push(step.done);
                frames.push(step.frame.clone());
                cur = step.context;
            }
            // Assemble: pads + real prefix + imagined timesteps.
            let n_real = prefix.valid.iter().filter(|&&v| v).count();
            let pads = l - n_real - n_imagined;
            let mut seg = TokenSegment {
                task: row,
                frames: vec![vec![0u16; k]; pads],
                actions: vec![0; pads],
                ternary: vec![0; pads],
                done: vec![false; pads],
                truncated: vec![false; pads],
                valid: vec![false; pads],
                imagined: vec![false; pads],
                tokens_per_frame: k,
            };
            for t in 0..prefix.n_timesteps() {
                if !prefix.valid[t] {
                    continue;
                }
                seg.frames.push(prefix.frames[t].clone());
                seg.actions.push(prefix.actions[t]);
                seg.ternary.push(prefix.ternary[t]);
                seg.done.push(prefix.done[t]);
                seg.truncated.push(prefix.truncated[t]);
                seg.valid.push(true);
                seg.imagined.push(false);
            }
            for i in 0..n_imagined {
                seg.frames.push(frames[i].clone());
                seg.actions.push(actions[i]);
                seg.ternary.push(ternary[i]);
                seg.done.push(dones[i]);
                seg.truncated.push(false);
                seg.valid.push(true);
                seg.imagined.push(true);
            }
            pool.push(seg);
        }
        Ok(pool)
    }

    // ── Evaluation ──────────────────────────────────────────────────────

    /// Roll out the learned policy on each spec and produce score rows.
    /// `plan` enables beam-search planning with the given (H, K).
    pub fn evaluate(
        &self,
        specs: &[(EnvSpec, usize)],
        episodes: usize,
        eps_eval: f64,
        plan: Option<(usize, usize)>,
        seed: u64,
    ) -> Result<Vec<ScoreRow>> {
        let mut rows = Vec::new();
        for (spec, task_row) in specs {
            let (ref_random, ref_oracle) = match (spec.ref_random, spec.ref_oracle) {
                (Some(r), Some(o)) => (r, o),
                _ => measure_reference_scores(spec, 64, self.cfg.train.gamma, seed ^ 0x5eed)?,
            };
            let plan_cfg = match plan {
                Some((h, k)) if h >= 1 => Some(PlanConfig::new(
                    h,
                    k.min(spec.task.valid_actions().len()),
                    self.cfg.train.gamma,
                    spec.task.valid_mask().to_vec(),
                )?),
                _ => None,
            };
            let policy = EvalPolicy::Learned {
                tokenizer: &self.tokenizer,
                model: &self.model,
                support: &self.support,
                plan: plan_cfg,
                task_id: *task_row,
            };
            let returns = rollout_policy(
                spec,
                &policy,
                episodes,
                eps_eval,
                self.cfg.train.gamma,
                seed,
            )?;
            let raw_mean = returns.iter().sum::<f64>() / returns.len() as f64;
            rows.push(ScoreRow {
                task: spec.task.name().to_string(),
                raw_mean,
                ref_random,
                ref_oracle,
                normalized: normalized_score(raw_mean, ref_random, ref_oracle)?,
            });
        }
        Ok(rows)
    }

    // ── Persistence ─────────────────────────────────────────────────────

    fn to_checkpoint(&self) -> CheckpointData {
        let dump = |p: &crate::numerics::ParamSet| {
            (0..p.len())
                .map(|i| {
                    let t = p.get(i);
                    (t.shape().to_vec(), t.values().to_vec())
                })
                .collect()
        };
        CheckpointData {
            config: self.cfg.clone(),
            tokenizer_params: dump(&self.tokenizer.params),
            model_params: dump(&self.model.params),
            target: self.target.clone(),
            tok_opt: self.tok_opt.clone(),
            model_opt: self.model_opt.clone(),
            counters: self.counters.clone(),
            rng_states: vec![
                self.data_rng.state(),
                self.dropout_rng.state(),
                self.synth_rng.state(),
            ],
            tok_last_used: self.tokenizer.last_used.clone(),
            tok_data_initialized: self.tokenizer.data_initialized,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint())
    }

    /// Restore a trainer from a checkpoint. When `expected` is given, its
    /// hash must match the stored config (refusal otherwise).
    pub fn load(path: &Path, expected: Option<&Config>) -> Result<Trainer> {
        let data = load_checkpoint(path)?;
        if let Some(exp) = expected {
            if exp.hash() != data.config.hash() {
                return Err(WamError::config(format!(
                    "checkpoint config hash {:016x} does not match expected {:016x}",
                    data.config.hash(),
                    exp.hash()
                )));
            }
        }
        let mut trainer = Trainer::new(data.config.clone())?;
        let restore = |p: &mut crate::numerics::ParamSet,
                       t: &[(Vec<usize>, Vec<f64>)]|
         -> Result<()> {
            if p.len() != t.len() {
                return Err(WamError::integrity(format!(
                    "checkpoint has {} tensors, model expects {}",
                    t.len(),
                    p.len()
                )));
            }
            for (i, (shape, values)) in t.iter().enumerate() {
                if p.get(i).shape() != shape.as_slice() {
                    return Err(WamError::integrity(format!(
                        "tensor {} shape mismatch",
                        i
                    )));
                }
                *p.get_mut(i) = crate::numerics::Tensor::new(shape.clone(), values.clone());
            }
            Ok(())
        };
        restore(&mut trainer.tokenizer.params, &data.tokenizer_params)?;
        restore(&mut trainer.model.params, &data.model_params)?;
        trainer.target = data.target;
        trainer.tok_opt = data.tok_opt;
        trainer.model_opt = data.model_opt;
        trainer.counters = data.counters;
        trainer.data_rng = Rng64::from_state(data.rng_states[0]);
        trainer.dropout_rng = Rng64::from_state(data.rng_states[1]);
        trainer.synth_rng = Rng64::from_state(data.rng_states[2]);
        trainer.tokenizer.last_used = data.tok_last_used;
        trainer.tokenizer.data_initialized = data.tok_data_initialized;
        Ok(trainer)
    }

    /// Fraction of valid actions predicted correctly by the world model on
    /// held-out segments (next-token top-1 accuracy).
    pub fn held_out_token_accuracy(
        &mut self,
        data: &Dataset,
        batches: usize,
    ) -> Result<f64> {
        let rows: Vec<usize> = (0..data.tasks.len()).collect();
        if self.token_cache.is_none() {
            self.token_cache = Some(TokenCache::build(&self.tokenizer, data)?);
        }
        let mut rng = Rng64::stream(self.cfg.train.seed, 0x77);
        let mut hits = 0.0;
        let mut n = 0usize;
        for _ in 0..batches {
            let raws = sample_segment_batch(
                data,
                self.cfg.model.seq_timesteps,
                self.cfg.train.batch_size,
                &mut rng,
            )?;
            let segs: Vec<TokenSegment> = raws
                .iter()
                .map(|r| self.tokenize_segment(r, rows[r.task_index]))
                .collect::<Result<_>>()?;
            let mut tape = Tape::eval();
            let (_, _, acc) = world_loss_batch(&mut tape, &self.model, &segs, Mode::Eval, None)?;
            hits += acc;
            n += 1;
        }
        Ok(hits / n as f64)
    }
}

enum Which {
    Tokenizer,
    Model,
}

/// Decode the next frame's tokens after a context that ends with a complete
/// (frame, action) block; no reward/termination readout.
pub fn decode_next_frame(model: &Backbone, ctx: &mut TokenContext) -> Result<Vec<u16>> {
    if ctx.awaiting_action() || ctx.n_frames() == 0 {
        return Err(WamError::contract(
            "frame decoding requires a complete (frame, action) context",
        ));
    }
    ctx.roll_for_new_frame();
    let k = model.cfg.tokens_per_frame;
    let v = model.cfg.vocab_size;
    let mut frame: Vec<u16> = Vec::with_capacity(k);
    for _ in 0..k {
        let seq = ctx.seq_with_partial(v, &frame);
        let last = seq.emb_ids.len() - 1;
        let req = HeadRequest {
            token_positions: vec![last],
            reward_done_positions: vec![],
            q_positions: vec![],
            q_target: false,
            stop_grad_q_rows: false,
        };
        let mut tape = Tape::eval();
        let out = model.forward(&mut tape, &seq, Mode::Eval, None, &req, None)?;
        let logits = tape.value(out.token_logits.unwrap());
        let mut best = 0usize;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        frame.push(best as u16);
    }
    ctx.push_frame(frame.clone())?;
    Ok(frame)
}

/// Obstacle-free helper for the environments used during evaluation:
/// per-task plan width per the valid-action-size heuristic (width 2 below
/// ten valid actions).
pub fn default_beam_width(spec: &EnvSpec) -> usize {
    if spec.task.valid_actions().len() < 10 {
        2
    } else {
        3
    }
}
