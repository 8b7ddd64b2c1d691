//! Causal self-attention sequence model over interleaved observation/action
//! tokens with task embeddings, plus the four heads: next-token, reward,
//! termination, and the distributional Q-head. Also hosts the token context
//! used for imagination and the world-model adapter the planner consumes.

use crate::config::ModelConfig;
use crate::error::{Result, WamError};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{ParamSet, Tensor};
use crate::rng::Rng64;
use serde::{Deserialize, Serialize};

/// Interleaved training segment: per timestep K observation tokens followed
/// by one action token, left-padded to a fixed number of timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSegment {
    pub task: usize,
    pub frames: Vec<Vec<u16>>,
    pub actions: Vec<u8>,
    pub ternary: Vec<i8>,
    pub done: Vec<bool>,
    /// done flags raised by the episode step limit rather than the dynamics;
    /// truncated timesteps train the termination head as "not done" and are
    /// censored from TD targets.
    pub truncated: Vec<bool>,
    /// Per-timestep validity; false marks left padding.
    pub valid: Vec<bool>,
    /// Timesteps synthesized by the planner during fine-tuning.
    pub imagined: Vec<bool>,
    pub tokens_per_frame: usize,
}

/// Interleave frames and actions into a left-padded segment. `frames` and
/// `actions` must have equal length no greater than `seq_timesteps`.
pub fn build_interleaved_sequence(
    task: usize,
    frames: Vec<Vec<u16>>,
    actions: Vec<u8>,
    tokens_per_frame: usize,
    seq_timesteps: usize,
) -> Result<TokenSegment> {
    if frames.len() != actions.len() {
        return Err(WamError::contract(format!(
            "{} frames vs {} actions",
            frames.len(),
            actions.len()
        )));
    }
    if frames.len() > seq_timesteps {
        return Err(WamError::contract(format!(
            "{} timesteps exceed segment length {}",
            frames.len(),
            seq_timesteps
        )));
    }
    for f in &frames {
        if f.len() != tokens_per_frame {
            return Err(WamError::contract(format!(
                "frame has {} tokens, expected {}",
                f.len(),
                tokens_per_frame
            )));
        }
    }
    let pads = seq_timesteps - frames.len();
    let mut seg = TokenSegment {
        task,
        frames: vec![vec![0; tokens_per_frame]; pads],
        actions: vec![0; pads],
        ternary: vec![0; seq_timesteps],
        done: vec![false; seq_timesteps],
        truncated: vec![false; seq_timesteps],
        valid: vec![false; pads],
        imagined: vec![false; seq_timesteps],
        tokens_per_frame,
    };
    seg.frames.extend(frames);
    seg.actions.extend(actions);
    seg.valid.extend(std::iter::repeat(true).take(seq_timesteps - pads));
    Ok(seg)
}

impl TokenSegment {
    pub fn n_timesteps(&self) -> usize {
        self.valid.len()
    }

    pub fn n_positions(&self) -> usize {
        self.n_timesteps() * (self.tokens_per_frame + 1)
    }

    pub fn obs_pos(&self, t: usize, k: usize) -> usize {
        t * (self.tokens_per_frame + 1) + k
    }

    pub fn act_pos(&self, t: usize) -> usize {
        t * (self.tokens_per_frame + 1) + self.tokens_per_frame
    }

    pub fn obs_last_pos(&self, t: usize) -> usize {
        self.act_pos(t) - 1
    }

    /// Per-position validity mask (every position of a pad timestep is pad).
    pub fn pad_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.n_positions());
        for t in 0..self.n_timesteps() {
            for _ in 0..=self.tokens_per_frame {
                m.push(self.valid[t]);
            }
        }
        m
    }

    /// Flattened position-level view with combined embedding ids
    /// (observation tokens in [0, V), action tokens offset by V).
    pub fn sequence(&self, vocab: usize) -> InterleavedSeq {
        let k = self.tokens_per_frame;
        let mut emb_ids = Vec::with_capacity(self.n_positions());
        let mut is_action = Vec::with_capacity(self.n_positions());
        for t in 0..self.n_timesteps() {
            for i in 0..k {
                emb_ids.push(self.frames[t][i] as usize);
                is_action.push(false);
            }
            emb_ids.push(vocab + self.actions[t] as usize);
            is_action.push(true);
        }
        InterleavedSeq {
            task: self.task,
            emb_ids,
            is_action,
            valid: self.pad_mask(),
        }
    }
}

/// Flattened position-level view consumed by the forward pass.
#[derive(Debug, Clone)]
pub struct InterleavedSeq {
    pub task: usize,
    pub emb_ids: Vec<usize>,
    pub is_action: Vec<bool>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which heads to evaluate, and at which sequence positions.
#[derive(Debug, Clone, Default)]
pub struct HeadRequest {
    /// Next-token logits at these positions (conditioning positions).
    pub token_positions: Vec<usize>,
    /// Reward and termination logits at these positions (action positions).
    pub reward_done_positions: Vec<usize>,
    /// Q-head logits at these positions (last-observation-token positions).
    pub q_positions: Vec<usize>,
    /// Also evaluate the frozen target Q-head at `q_positions`.
    pub q_target: bool,
    /// Detach the Q-head input rows from the backbone (the stop-gradient
    /// action-loss ablation).
    pub stop_grad_q_rows: bool,
}

pub struct ForwardOutput {
    pub hidden: Var,
    pub token_logits: Option<Var>,
    pub reward_logits: Option<Var>,
    pub done_logits: Option<Var>,
    /// [n_q_positions, a_max * atoms]
    pub q_logits: Option<Var>,
    pub q_target_logits: Option<Var>,
    /// Attention probability matrices captured for inspection (layer-major,
    /// then head), populated only when `capture_attention` is set.
    pub attention: Vec<Vec<f64>>,
}

struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

struct QHeadIds {
    l1_w: usize,
    l1_b: usize,
    ln1_g: usize,
    ln1_b: usize,
    l2_w: usize,
    l2_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    l3_w: usize,
    l3_b: usize,
}

struct Ids {
    tok_emb: usize,
    pos_emb: usize,
    task_emb: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    wo_w: usize,
    wo_b: usize,
    wr_w: usize,
    wr_b: usize,
    wd_w: usize,
    wd_b: usize,
    q: QHeadIds,
}

/// Frozen copy of the Q-head parameters (ordered as the online head's
/// parameter list) plus the step of the last hard sync.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetHeadState {
    pub tensors: Vec<(Vec<usize>, Vec<f64>)>,
    pub last_sync: u64,
}

pub struct Backbone {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    ids: Ids,
    pub capture_attention: bool,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng64) -> Result<Backbone> {
        cfg.validate()?;
        let h = cfg.hidden;
        let v = cfg.vocab_size;
        let std = 0.02;
        let mut p = ParamSet::new();
        let tok_emb = p.add(
            "bb.tok_emb",
            Tensor::randn(vec![v + cfg.a_max, h], std, rng),
            false,
        );
        let pos_emb = p.add(
            "bb.pos_emb",
            Tensor::randn(vec![cfg.max_tokens(), h], std, rng),
            false,
        );
        let task_emb = p.add(
            "bb.task_emb",
            Tensor::randn(vec![cfg.num_tasks * 2, h], std, rng),
            false,
        );
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("bb.l{}.{}", l, s);
            layers.push(LayerIds {
                ln1_g: p.add(n("ln1.g"), Tensor::full(vec![h], 1.0), false),
                ln1_b: p.add(n("ln1.b"), Tensor::zeros(vec![h]), false),
                qkv_w: p.add(n("qkv.w"), Tensor::randn(vec![h, 3 * h], std, rng), true),
                qkv_b: p.add(n("qkv.b"), Tensor::zeros(vec![3 * h]), false),
                proj_w: p.add(n("proj.w"), Tensor::randn(vec![h, h], std, rng), true),
                proj_b: p.add(n("proj.b"), Tensor::zeros(vec![h]), false),
                ln2_g: p.add(n("ln2.g"), Tensor::full(vec![h], 1.0), false),
                ln2_b: p.add(n("ln2.b"), Tensor::zeros(vec![h]), false),
                fc1_w: p.add(n("fc1.w"), Tensor::randn(vec![h, 4 * h], std, rng), true),
                fc1_b: p.add(n("fc1.b"), Tensor::zeros(vec![4 * h]), false),
                fc2_w: p.add(n("fc2.w"), Tensor::randn(vec![4 * h, h], std, rng), true),
                fc2_b: p.add(n("fc2.b"), Tensor::zeros(vec![h]), false),
            });
        }
        let lnf_g = p.add("bb.lnf.g", Tensor::full(vec![h], 1.0), false);
        let lnf_b = p.add("bb.lnf.b", Tensor::zeros(vec![h]), false);
        let wo_w = p.add("head.obs.w", Tensor::randn(vec![h, v], std, rng), true);
        let wo_b = p.add("head.obs.b", Tensor::zeros(vec![v]), false);
        let wr_w = p.add("head.reward.w", Tensor::randn(vec![h, 3], std, rng), true);
        let wr_b = p.add("head.reward.b", Tensor::zeros(vec![3]), false);
        let wd_w = p.add("head.done.w", Tensor::randn(vec![h, 2], std, rng), true);
        let wd_b = p.add("head.done.b", Tensor::zeros(vec![2]), false);
        let qh = cfg.qhead_hidden;
        let q_out = cfg.a_max * cfg.atoms;
        let q = QHeadIds {
            l1_w: p.add("qhead.l1.w", Tensor::randn(vec![h, qh], std, rng), true),
            l1_b: p.add("qhead.l1.b", Tensor::zeros(vec![qh]), false),
            ln1_g: p.add("qhead.ln1.g", Tensor::full(vec![qh], 1.0), false),
            ln1_b: p.add("qhead.ln1.b", Tensor::zeros(vec![qh]), false),
            l2_w: p.add("qhead.l2.w", Tensor::randn(vec![qh, qh], std, rng), true),
            l2_b: p.add("qhead.l2.b", Tensor::zeros(vec![qh]), false),
            ln2_g: p.add("qhead.ln2.g", Tensor::full(vec![qh], 1.0), false),
            ln2_b: p.add("qhead.ln2.b", Tensor::zeros(vec![qh]), false),
            l3_w: p.add("qhead.l3.w", Tensor::randn(vec![qh, q_out], std, rng), true),
            l3_b: p.add("qhead.l3.b", Tensor::zeros(vec![q_out]), false),
        };
        Ok(Backbone {
            cfg: cfg.clone(),
            params: p,
            ids: Ids {
                tok_emb,
                pos_emb,
                task_emb,
                layers,
                lnf_g,
                lnf_b,
                wo_w,
                wo_b,
                wr_w,
                wr_b,
                wd_w,
                wd_b,
                q,
            },
            capture_attention: false,
        })
    }

    /// Parameter ids of the Q-head, in a stable order.
    pub fn q_head_param_ids(&self) -> Vec<usize> {
        let q = &self.ids.q;
        vec![
            q.l1_w, q.l1_b, q.ln1_g, q.ln1_b, q.l2_w, q.l2_b, q.ln2_g, q.ln2_b, q.l3_w, q.l3_b,
        ]
    }

    pub fn task_emb_id(&self) -> usize {
        self.ids.task_emb
    }

    /// Snapshot the online Q-head into a frozen target copy.
    pub fn snapshot_q_head(&self, step: u64) -> TargetHeadState {
        TargetHeadState {
            tensors: self
                .q_head_param_ids()
                .iter()
                .map(|&pid| {
                    let t = self.params.get(pid);
                    (t.shape().to_vec(), t.values().to_vec())
                })
                .collect(),
            last_sync: step,
        }
    }

    /// Register a fresh task: appends one observation row and one action row
    /// to the task-embedding table, each initialized to the mean of the
    /// existing rows of its kind. Returns the new task id.
    pub fn register_task(&mut self) -> usize {
        let h = self.cfg.hidden;
        let n = self.cfg.num_tasks;
        let table = self.params.get(self.ids.task_emb).values().to_vec();
        let mut mean_obs = vec![0.0; h];
        let mut mean_act = vec![0.0; h];
        for t in 0..n {
            for j in 0..h {
                mean_obs[j] += table[(t * 2) * h + j] / n as f64;
                mean_act[j] += table[(t * 2 + 1) * h + j] / n as f64;
            }
        }
        let mut new_table = table;
        new_table.extend_from_slice(&mean_obs);
        new_table.extend_from_slice(&mean_act);
        *self.params.get_mut(self.ids.task_emb) =
            Tensor::new(vec![(n + 1) * 2, h], new_table);
        self.cfg.num_tasks += 1;
        self.cfg.num_tasks - 1
    }

    /// Per-position embedding: vocabulary + position + task (observation and
    /// action tokens use separate task rows).
    pub fn embed_sequence(&self, tape: &mut Tape, seq: &InterleavedSeq) -> Result<Var> {
        self.embed_batch(tape, std::slice::from_ref(seq))
    }

    /// Batched embedding over equal-length sequences, packed row-major.
    pub fn embed_batch(&self, tape: &mut Tape, seqs: &[InterleavedSeq]) -> Result<Var> {
        let t_len = seqs[0].emb_ids.len();
        let mut tok_idx = Vec::with_capacity(seqs.len() * t_len);
        let mut pos_idx = Vec::with_capacity(seqs.len() * t_len);
        let mut task_idx = Vec::with_capacity(seqs.len() * t_len);
        for seq in seqs {
            if seq.task >= self.cfg.num_tasks {
                return Err(WamError::contract(format!(
                    "unknown task id {} (have {})",
                    seq.task, self.cfg.num_tasks
                )));
            }
            if seq.emb_ids.len() != t_len {
                return Err(WamError::contract("sequences in a batch must share a length"));
            }
            if t_len > self.cfg.max_tokens() {
                return Err(WamError::contract(format!(
                    "sequence of {} positions exceeds max tokens {}",
                    t_len,
                    self.cfg.max_tokens()
                )));
            }
            tok_idx.extend_from_slice(&seq.emb_ids);
            pos_idx.extend(0..t_len);
            task_idx.extend(seq.is_action.iter().map(|&ia| seq.task * 2 + ia as usize));
        }
        let tok_table = tape.param(&self.params, self.ids.tok_emb);
        let pos_table = tape.param(&self.params, self.ids.pos_emb);
        let task_table = tape.param(&self.params, self.ids.task_emb);
        let tok = tape.gather_rows(tok_table, &tok_idx);
        let pos = tape.gather_rows(pos_table, &pos_idx);
        let task = tape.gather_rows(task_table, &task_idx);
        let sum = tape.add(tok, pos);
        Ok(tape.add(sum, task))
    }

    /// Transformer stack over embedded positions for a batch of
    /// equal-length sequences packed as [batch * seq, hidden]. Hidden state
    /// at position i depends only on positions <= i of its own sequence.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape,
        emb: Var,
        batch: usize,
        seq: usize,
        valid: &[bool],
        mode: Mode,
        rng: Option<&mut Rng64>,
        mut attention_out: Option<&mut Vec<Vec<f64>>>,
    ) -> Var {
        let drop = |tape: &mut Tape, x: Var, rng: &mut Option<&mut Rng64>| -> Var {
            match (mode, rng.as_deref_mut()) {
                (Mode::Train, Some(r)) => tape.dropout(x, self.cfg.dropout, r),
                _ => x,
            }
        };
        let mut rng = rng;
        let mut x = drop(tape, emb, &mut rng);
        for l in &self.ids.layers {
            let ln1_g = tape.param(&self.params, l.ln1_g);
            let ln1_b = tape.param(&self.params, l.ln1_b);
            let a_in = tape.layer_norm_rows(x, ln1_g, ln1_b, 1e-5);
            let qkv_w = tape.param(&self.params, l.qkv_w);
            let qkv_b = tape.param(&self.params, l.qkv_b);
            let qkv_lin = tape.matmul(a_in, qkv_w);
            let qkv = tape.add_bias(qkv_lin, qkv_b);
            let attn_p = if mode == Mode::Train { self.cfg.dropout } else { 0.0 };
            let merged = tape.causal_attention(
                qkv,
                batch,
                seq,
                self.cfg.heads,
                valid,
                attn_p,
                rng.as_deref_mut(),
            );
            if let Some(capture) = attention_out.as_deref_mut() {
                let (probs, b, h, t) = tape.attention_probs(merged).expect("attention node");
                for bh in 0..b * h {
                    capture.push(probs[bh * t * t..(bh + 1) * t * t].to_vec());
                }
            }
            let proj_w = tape.param(&self.params, l.proj_w);
            let proj_b = tape.param(&self.params, l.proj_b);
            let proj_lin = tape.matmul(merged, proj_w);
            let proj = tape.add_bias(proj_lin, proj_b);
            let proj = drop(tape, proj, &mut rng);
            x = tape.add(x, proj);

            let ln2_g = tape.param(&self.params, l.ln2_g);
            let ln2_b = tape.param(&self.params, l.ln2_b);
            let m_in = tape.layer_norm_rows(x, ln2_g, ln2_b, 1e-5);
            let fc1_w = tape.param(&self.params, l.fc1_w);
            let fc1_b = tape.param(&self.params, l.fc1_b);
            let h1_lin = tape.matmul(m_in, fc1_w);
            let h1 = tape.add_bias(h1_lin, fc1_b);
            let act = tape.gelu(h1);
            let fc2_w = tape.param(&self.params, l.fc2_w);
            let fc2_b = tape.param(&self.params, l.fc2_b);
            let h2_lin = tape.matmul(act, fc2_w);
            let h2 = tape.add_bias(h2_lin, fc2_b);
            let h2 = drop(tape, h2, &mut rng);
            x = tape.add(x, h2);
        }
        let lnf_g = tape.param(&self.params, self.ids.lnf_g);
        let lnf_b = tape.param(&self.params, self.ids.lnf_b);
        tape.layer_norm_rows(x, lnf_g, lnf_b, 1e-5)
    }

    fn q_head_forward(
        &self,
        tape: &mut Tape,
        rows: Var,
        mode: Mode,
        mut rng: Option<&mut Rng64>,
        target: Option<&TargetHeadState>,
    ) -> Var {
        // Either tape the online parameters or leaf the frozen target copy
        // (leaves receive no gradient).
        let ids = self.q_head_param_ids();
        let vars: Vec<Var> = match target {
            None => ids.iter().map(|&pid| tape.param(&self.params, pid)).collect(),
            Some(t) => t
                .tensors
                .iter()
                .map(|(shape, values)| tape.leaf(shape.clone(), values.clone()))
                .collect(),
        };
        let [l1_w, l1_b, ln1_g, ln1_b, l2_w, l2_b, ln2_g, ln2_b, l3_w, l3_b] =
            <[Var; 10]>::try_from(vars).expect("ten q-head params");
        let drop = |tape: &mut Tape, x: Var, rng: &mut Option<&mut Rng64>| -> Var {
            match (mode, rng.as_deref_mut()) {
                (Mode::Train, Some(r)) => tape.dropout(x, self.cfg.qhead_dropout, r),
                _ => x,
            }
        };
        let h1_lin = tape.matmul(rows, l1_w);
        let h1 = tape.add_bias(h1_lin, l1_b);
        let h1 = tape.layer_norm_rows(h1, ln1_g, ln1_b, 1e-5);
        let h1 = tape.mish(h1);
        let h1 = drop(tape, h1, &mut rng);
        let h2_lin = tape.matmul(h1, l2_w);
        let h2 = tape.add_bias(h2_lin, l2_b);
        let h2 = tape.layer_norm_rows(h2, ln2_g, ln2_b, 1e-5);
        let h2 = tape.mish(h2);
        let h2 = drop(tape, h2, &mut rng);
        let out_lin = tape.matmul(h2, l3_w);
        tape.add_bias(out_lin, l3_b)
    }

    /// Full forward pass for one sequence.
    pub fn forward(
        &self,
        tape: &mut Tape,
        seq: &InterleavedSeq,
        mode: Mode,
        rng: Option<&mut Rng64>,
        req: &HeadRequest,
        target: Option<&TargetHeadState>,
    ) -> Result<ForwardOutput> {
        let mut outs = self.forward_batch(
            tape,
            std::slice::from_ref(seq),
            mode,
            rng,
            std::slice::from_ref(req),
            target,
        )?;
        Ok(outs.pop().expect("one output per sequence"))
    }

    /// Batched forward pass over equal-length sequences: one trunk pass,
    /// one pass per head over the gathered rows, then per-sequence views.
    /// Head positions in each request are sequence-local.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        seqs: &[InterleavedSeq],
        mode: Mode,
        mut rng: Option<&mut Rng64>,
        reqs: &[HeadRequest],
        target: Option<&TargetHeadState>,
    ) -> Result<Vec<ForwardOutput>> {
        if seqs.is_empty() || seqs.len() != reqs.len() {
            return Err(WamError::contract("one head request per sequence"));
        }
        let t_len = seqs[0].emb_ids.len();
        let emb = self.embed_batch(tape, seqs)?;
        let valid: Vec<bool> = seqs.iter().flat_map(|s| s.valid.iter().copied()).collect();
        let mut attention = Vec::new();
        let hidden = self.backbone_forward(
            tape,
            emb,
            seqs.len(),
            t_len,
            &valid,
            mode,
            rng.as_deref_mut(),
            if self.capture_attention {
                Some(&mut attention)
            } else {
                None
            },
        );
        let linear_head = |tape: &mut Tape, rows: Var, w: usize, b: usize| -> Var {
            let w = tape.param(&self.params, w);
            let b = tape.param(&self.params, b);
            let lin = tape.matmul(rows, w);
            tape.add_bias(lin, b)
        };
        // Concatenate requested positions across the batch, run each head
        // once, then hand per-sequence row ranges back.
        let flatten = |sel: fn(&HeadRequest) -> &Vec<usize>| -> (Vec<usize>, Vec<(usize, usize)>) {
            let mut all = Vec::new();
            let mut ranges = Vec::with_capacity(reqs.len());
            for (bi, req) in reqs.iter().enumerate() {
                let start = all.len();
                all.extend(sel(req).iter().map(|&p| bi * t_len + p));
                ranges.push((start, all.len() - start));
            }
            (all, ranges)
        };
        let (tok_pos, tok_ranges) = flatten(|r| &r.token_positions);
        let token_all = if tok_pos.is_empty() {
            None
        } else {
            let rows = tape.gather_rows(hidden, &tok_pos);
            Some(linear_head(tape, rows, self.ids.wo_w, self.ids.wo_b))
        };
        let (rd_pos, rd_ranges) = flatten(|r| &r.reward_done_positions);
        let (reward_all, done_all) = if rd_pos.is_empty() {
            (None, None)
        } else {
            let rows = tape.gather_rows(hidden, &rd_pos);
            (
                Some(linear_head(tape, rows, self.ids.wr_w, self.ids.wr_b)),
                Some(linear_head(tape, rows, self.ids.wd_w, self.ids.wd_b)),
            )
        };
        let (q_pos, q_ranges) = flatten(|r| &r.q_positions);
        let (q_all, q_target_all) = if q_pos.is_empty() {
            (None, None)
        } else {
            let mut rows = tape.gather_rows(hidden, &q_pos);
            if reqs.iter().any(|r| r.stop_grad_q_rows) {
                rows = tape.stop_grad(rows);
            }
            let online = self.q_head_forward(tape, rows, mode, rng.as_deref_mut(), None);
            let target_logits = if reqs.iter().any(|r| r.q_target) {
                let t = target.ok_or_else(|| {
                    WamError::contract("target head requested but not provided")
                })?;
                Some(self.q_head_forward(tape, rows, Mode::Eval, None, Some(t)))
            } else {
                None
            };
            (Some(online), target_logits)
        };
        let slice_range = |tape: &mut Tape, all: Option<Var>, range: (usize, usize)| -> Option<Var> {
            match (all, range.1) {
                (Some(v), n) if n > 0 => {
                    let idx: Vec<usize> = (range.0..range.0 + n).collect();
                    Some(tape.gather_rows(v, &idx))
                }
                _ => None,
            }
        };
        let mut outs = Vec::with_capacity(seqs.len());
        for bi in 0..seqs.len() {
            outs.push(ForwardOutput {
                hidden,
                token_logits: slice_range(tape, token_all, tok_ranges[bi]),
                reward_logits: slice_range(tape, reward_all, rd_ranges[bi]),
                done_logits: slice_range(tape, done_all, rd_ranges[bi]),
                q_logits: slice_range(tape, q_all, q_ranges[bi]),
                q_target_logits: slice_range(tape, q_target_all, q_ranges[bi]),
                attention: if bi == 0 {
                    std::mem::take(&mut attention)
                } else {
                    Vec::new()
                },
            });
        }
        Ok(outs)
    }
}

// ── Imagination ─────────────────────────────────────────────────────────

/// Rolling interleaved token window used at decision time. Only the final
/// block may lack its action. When a new frame would exceed the backbone's
/// timestep capacity, the oldest full block (K+1 tokens) is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenContext {
    pub task: usize,
    blocks: Vec<(Vec<u16>, Option<u8>)>,
    max_timesteps: usize,
    tokens_per_frame: usize,
}

impl TokenContext {
    pub fn new(task: usize, max_timesteps: usize, tokens_per_frame: usize) -> Self {
        TokenContext {
            task,
            blocks: Vec::new(),
            max_timesteps,
            tokens_per_frame,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.blocks.len()
    }

    pub fn awaiting_action(&self) -> bool {
        self.blocks.last().map(|(_, a)| a.is_none()).unwrap_or(false)
    }

    pub fn push_frame(&mut self, frame: Vec<u16>) -> Result<()> {
        if frame.len() != self.tokens_per_frame {
            return Err(WamError::contract("frame token count mismatch"));
        }
        if self.awaiting_action() {
            return Err(WamError::contract("previous frame still awaits an action"));
        }
        self.blocks.push((frame, None));
        if self.blocks.len() > self.max_timesteps {
            self.blocks.remove(0);
        }
        Ok(())
    }

    pub fn push_action(&mut self, action: u8) -> Result<()> {
        if !self.awaiting_action() {
            return Err(WamError::contract("no frame awaiting an action"));
        }
        self.blocks.last_mut().unwrap().1 = Some(action);
        Ok(())
    }

    /// Drop the oldest full block so a freshly decoded frame fits within the
    /// position budget.
    pub fn roll_for_new_frame(&mut self) {
        if self.blocks.len() >= self.max_timesteps {
            self.blocks.remove(0);
        }
    }

    /// Flatten, optionally with a partially decoded frame appended. The
    /// window is left-padded with masked blocks so real content occupies the
    /// same (right-aligned) positions it does in training segments.
    pub fn seq_with_partial(&self, vocab: usize, partial: &[u16]) -> InterleavedSeq {
        let k = self.tokens_per_frame;
        // A context whose last block is complete is about to receive a new
        // frame: reserve that block's slot so conditioning positions line up
        // with the training layout.
        let used_blocks = if self.awaiting_action() {
            self.blocks.len()
        } else {
            self.blocks.len() + 1
        };
        let pads = self.max_timesteps.saturating_sub(used_blocks.max(1));
        let mut emb_ids = Vec::new();
        let mut is_action = Vec::new();
        let mut valid = Vec::new();
        for _ in 0..pads {
            for _ in 0..k {
                emb_ids.push(0);
                is_action.push(false);
                valid.push(false);
            }
            emb_ids.push(vocab);
            is_action.push(true);
            valid.push(false);
        }
        for (frame, action) in &self.blocks {
            for &t in frame {
                emb_ids.push(t as usize);
                is_action.push(false);
                valid.push(true);
            }
            if let Some(a) = action {
                emb_ids.push(vocab + *a as usize);
                is_action.push(true);
                valid.push(true);
            }
        }
        for &t in partial {
            emb_ids.push(t as usize);
            is_action.push(false);
            valid.push(true);
        }
        InterleavedSeq {
            task: self.task,
            emb_ids,
            is_action,
            valid,
        }
    }
}

/// Token decoding mode for imagination.
pub enum Decode<'a> {
    Greedy,
    Sample(&'a mut Rng64),
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_row(row: &[f64], rng: &mut Rng64) -> usize {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut u = rng.uniform() * z;
    for (i, &e) in exps.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i;
        }
    }
    exps.len() - 1
}

/// Outcome of one imagined step.
#[derive(Debug, Clone)]
pub struct ImaginedStep {
    pub frame: Vec<u16>,
    pub reward_class: i8,
    pub done: bool,
    pub context: TokenContext,
}

/// Append the action, read reward and termination at its position, then
/// autoregressively decode the next frame's K tokens (greedy by default).
pub fn imagine_step(
    model: &Backbone,
    ctx: &TokenContext,
    action: u8,
    mut decode: Decode<'_>,
) -> Result<ImaginedStep> {
    if ctx.n_frames() == 0 || !ctx.awaiting_action() {
        return Err(WamError::contract(
            "imagination requires a context ending in a frame awaiting its action",
        ));
    }
    let k = model.cfg.tokens_per_frame;
    let v = model.cfg.vocab_size;
    let mut ctx2 = ctx.clone();
    ctx2.push_action(action)?;
    ctx2.roll_for_new_frame();
    let mut frame: Vec<u16> = Vec::with_capacity(k);
    let mut reward_class = 0i8;
    let mut done = false;
    for step in 0..k {
        let seq = ctx2.seq_with_partial(v, &frame);
        let last = seq.emb_ids.len() - 1;
        let req = HeadRequest {
            token_positions: vec![last],
            reward_done_positions: if step == 0 { vec![last] } else { vec![] },
            q_positions: vec![],
            q_target: false,
            stop_grad_q_rows: false,
        };
        let mut tape = Tape::eval();
        let out = model.forward(&mut tape, &seq, Mode::Eval, None, &req, None)?;
        if step == 0 {
            let r_row = tape.value(out.reward_logits.unwrap()).to_vec();
            reward_class = argmax_row(&r_row) as i8 - 1;
            let d_row = tape.value(out.done_logits.unwrap()).to_vec();
            done = argmax_row(&d_row) == 1;
        }
        let logits = tape.value(out.token_logits.unwrap()).to_vec();
        let tok = match &mut decode {
            Decode::Greedy => argmax_row(&logits),
            Decode::Sample(rng) => sample_row(&logits, rng),
        };
        frame.push(tok as u16);
    }
    ctx2.push_frame(frame.clone())?;
    Ok(ImaginedStep {
        frame,
        reward_class,
        done,
        context: ctx2,
    })
}

/// Q(o, a) for every global action, read at the last observation token of
/// the current frame: softmax over atoms, then the mean over `support`.
pub fn q_values_at_context(
    model: &Backbone,
    ctx: &TokenContext,
    support: &[f64],
) -> Result<Vec<f64>> {
    if ctx.n_frames() == 0 || !ctx.awaiting_action() {
        return Err(WamError::contract(
            "q_values needs a context ending in a frame awaiting its action",
        ));
    }
    let seq = ctx.seq_with_partial(model.cfg.vocab_size, &[]);
    let last = seq.emb_ids.len() - 1;
    let req = HeadRequest {
        token_positions: vec![],
        reward_done_positions: vec![],
        q_positions: vec![last],
        q_target: false,
        stop_grad_q_rows: false,
    };
    let mut tape = Tape::eval();
    let out = model.forward(&mut tape, &seq, Mode::Eval, None, &req, None)?;
    let logits = tape.value(out.q_logits.unwrap());
    let n = support.len();
    let mut q = Vec::with_capacity(model.cfg.a_max);
    for a in 0..model.cfg.a_max {
        let row = &logits[a * n..(a + 1) * n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        q.push(
            exps.iter()
                .zip(support)
                .map(|(&e, &s)| e / z * s)
                .sum::<f64>(),
        );
    }
    Ok(q)
}

/// Planner adapter over the learned model. Rewards are the decoded ternary
/// classes.
pub struct LearnedWorldModel<'a> {
    pub model: &'a Backbone,
    pub support: Vec<f64>,
}

impl crate::planner::WorldModel for LearnedWorldModel<'_> {
    type State = TokenContext;

    fn q_values(&mut self, s: &TokenContext) -> Vec<f64> {
        q_values_at_context(self.model, s, &self.support).expect("context is plannable")
    }

    fn imagine_step(&mut self, s: &TokenContext, action: usize) -> (TokenContext, f64, bool) {
        let step = imagine_step(self.model, s, action as u8, Decode::Greedy)
            .expect("context is imaginable");
        (step.context, step.reward_class as f64, step.done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            tokens_per_frame: 4,
            code_dim: 8,
            enc_channels: 4,
            layers: 2,
            hidden: 32,
            heads: 4,
            dropout: 0.1,
            qhead_layers: 3,
            qhead_hidden: 24,
            qhead_dropout: 0.01,
            seq_timesteps: 4,
            a_max: 5,
            num_tasks: 3,
            atoms: 11,
            ..ModelConfig::default()
        }
    }

    fn tiny_model(seed: u64) -> Backbone {
        let mut rng = Rng64::new(seed);
        Backbone::new(&tiny_cfg(), &mut rng).unwrap()
    }

    fn full_segment(model: &Backbone, seed: u64) -> TokenSegment {
        let mut rng = Rng64::new(seed);
        let cfg = &model.cfg;
        let frames: Vec<Vec<u16>> = (0..cfg.seq_timesteps)
            .map(|_| {
                (0..cfg.tokens_per_frame)
                    .map(|_| rng.below(cfg.vocab_size) as u16)
                    .collect()
            })
            .collect();
        let actions: Vec<u8> = (0..cfg.seq_timesteps)
            .map(|_| rng.below(cfg.a_max) as u8)
            .collect();
        build_interleaved_sequence(
            0,
            frames,
            actions,
            cfg.tokens_per_frame,
            cfg.seq_timesteps,
        )
        .unwrap()
    }

    #[test]
    fn interleaved_layout_and_padding() {
        // L' = 2, K = 2 -> 6 tokens in (z z a z z a) order.
        let seg = build_interleaved_sequence(
            0,
            vec![vec![3, 4], vec![5, 6]],
            vec![1, 0],
            2,
            2,
        )
        .unwrap();
        assert_eq!(seg.n_positions(), 6);
        let seq = seg.sequence(16);
        assert_eq!(seq.emb_ids, vec![3, 4, 16 + 1, 5, 6, 16]);
        assert_eq!(
            seq.is_action,
            vec![false, false, true, false, false, true]
        );

        // L' = 1 into L = 2: first block fully masked.
        let seg = build_interleaved_sequence(0, vec![vec![3, 4]], vec![1], 2, 2).unwrap();
        let mask = seg.pad_mask();
        assert_eq!(mask, vec![false, false, false, true, true, true]);

        // mismatched lengths rejected
        assert!(build_interleaved_sequence(0, vec![vec![1, 2]], vec![], 2, 2).is_err());
    }

    #[test]
    fn paper_scale_position_budget() {
        let seg = build_interleaved_sequence(
            0,
            vec![vec![0u16; 36]; 8],
            vec![0u8; 8],
            36,
            8,
        )
        .unwrap();
        assert_eq!(seg.n_positions(), 296);
    }

    #[test]
    fn embedding_is_additive() {
        let mut model = tiny_model(3);
        let seg = full_segment(&model, 4);
        let seq = seg.sequence(model.cfg.vocab_size);

        // Zero the vocab and task tables: embedding equals position rows.
        let tok_id = model.params.id_of("bb.tok_emb").unwrap();
        let task_id = model.params.id_of("bb.task_emb").unwrap();
        let pos_id = model.params.id_of("bb.pos_emb").unwrap();
        let zeros = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        *model.params.get_mut(tok_id) = zeros(model.params.get(tok_id));
        *model.params.get_mut(task_id) = zeros(model.params.get(task_id));
        let mut tape = Tape::eval();
        let emb = model.embed_sequence(&mut tape, &seq).unwrap();
        let h = model.cfg.hidden;
        let pos_values = model.params.get(pos_id).values().to_vec();
        for p in 0..seq.emb_ids.len() {
            for j in 0..h {
                assert_eq!(tape.value(emb)[p * h + j], pos_values[p * h + j]);
            }
        }
    }

    #[test]
    fn task_embedding_shifts_output_by_delta() {
        let model = tiny_model(5);
        let seg = full_segment(&model, 6);
        let mut seq = seg.sequence(model.cfg.vocab_size);
        let mut tape = Tape::eval();
        let e0 = model.embed_sequence(&mut tape, &seq).unwrap();
        seq.task = 1;
        let e1 = model.embed_sequence(&mut tape, &seq).unwrap();
        let table = model.params.get(model.params.id_of("bb.task_emb").unwrap());
        let h = model.cfg.hidden;
        for (p, &is_act) in seq.is_action.iter().enumerate() {
            let row0 = (is_act as usize) + 0;
            let row1 = 2 + (is_act as usize);
            for j in 0..h {
                let delta = table.values()[row1 * h + j] - table.values()[row0 * h + j];
                let got = tape.value(e1)[p * h + j] - tape.value(e0)[p * h + j];
                assert!((got - delta).abs() < 1e-12);
            }
        }
        // unknown task rejected
        seq.task = 99;
        assert!(model.embed_sequence(&mut tape, &seq).is_err());
    }

    #[test]
    fn causality_perturbing_last_token_preserves_prefix() {
        let model = tiny_model(7);
        let seg = full_segment(&model, 8);
        let mut seq = seg.sequence(model.cfg.vocab_size);
        let run = |seq: &InterleavedSeq| {
            let mut tape = Tape::eval();
            let emb = model.embed_sequence(&mut tape, seq).unwrap();
            let hidden = model.backbone_forward(
                &mut tape,
                emb,
                1,
                seq.valid.len(),
                &seq.valid,
                Mode::Eval,
                None,
                None,
            );
            tape.value(hidden).to_vec()
        };
        let base = run(&seq);
        let last = seq.emb_ids.len() - 1;
        seq.emb_ids[last] = (model.cfg.vocab_size + 2) % (model.cfg.vocab_size + model.cfg.a_max);
        let perturbed = run(&seq);
        let h = model.cfg.hidden;
        for p in 0..last {
            for j in 0..h {
                assert_eq!(
                    base[p * h + j].to_bits(),
                    perturbed [p * h + j].to_bits(),
                    "hidden changed at position {}",
                    p
                );
            }
        }
        assert!(base[last * h..] != perturbed[last * h..]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut model = tiny_model(9);
        model.capture_attention = true;
        let seg = full_segment(&model, 10);
        let seq = seg.sequence(model.cfg.vocab_size);
        let mut tape = Tape::eval();
        let out = model
            .forward(&mut tape, &seq, Mode::Eval, None, &HeadRequest::default(), None)
            .unwrap();
        assert!(!out.attention.is_empty());
        let t = seq.emb_ids.len();
        for attn in &out.attention {
            for i in 0..t {
                let s: f64 = attn[i * t..(i + 1) * t].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_token_forward_shape() {
        let model = tiny_model(11);
        let seq = InterleavedSeq {
            task: 0,
            emb_ids: vec![3],
            is_action: vec![false],
            valid: vec![true],
        };
        let mut tape = Tape::eval();
        let emb = model.embed_sequence(&mut tape, &seq).unwrap();
        let hidden = model.backbone_forward(
                &mut tape,
                emb,
                1,
                seq.valid.len(),
                &seq.valid,
                Mode::Eval,
                None,
                None,
            );
        assert_eq!(tape.shape(hidden), &[1, model.cfg.hidden]);
    }

    #[test]
    fn overflowing_max_tokens_rejected() {
        let model = tiny_model(13);
        let n = model.cfg.max_tokens() + 1;
        let seq = InterleavedSeq {
            task: 0,
            emb_ids: vec![0; n],
            is_action: vec![false; n],
            valid: vec![true; n],
        };
        let mut tape = Tape::eval();
        assert!(model.embed_sequence(&mut tape, &seq).is_err());
    }

    #[test]
    fn q_distributions_normalize_and_bound_means() {
        let model = tiny_model(15);
        let mut ctx = TokenContext::new(0, 4, 4);
        ctx.push_frame(vec![1, 2, 3, 4]).unwrap();
        let support: Vec<f64> = (0..11).map(|i| -10.0 + i as f64 * 4.0).collect();
        let q = q_values_at_context(&model, &ctx, &support).unwrap();
        assert_eq!(q.len(), 5);
        for &v in &q {
            assert!((-10.0..=30.0).contains(&v));
        }
        // uniform distribution over atoms on [-10, 30] has mean 10
        let u = support.iter().sum::<f64>() / support.len() as f64;
        assert!((u - 10.0).abs() < 1e-9);
    }

    #[test]
    fn imagine_step_is_deterministic_and_rolls_context() {
        let model = tiny_model(17);
        let mut ctx = TokenContext::new(0, 4, 4);
        ctx.push_frame(vec![1, 2, 3, 4]).unwrap();
        let a = imagine_step(&model, &ctx, 2, Decode::Greedy).unwrap();
        let b = imagine_step(&model, &ctx, 2, Decode::Greedy).unwrap();
        assert_eq!(a.frame, b.frame);
        assert_eq!(a.reward_class, b.reward_class);
        assert_eq!(a.done, b.done);
        assert!((-1..=1).contains(&a.reward_class));

        // Rolling: after enough imagined steps the context holds at most
        // max_timesteps frames and stays imaginable.
        let mut ctx = a.context;
        for i in 0..6 {
            let step = imagine_step(&model, &ctx, (i % 5) as u8, Decode::Greedy).unwrap();
            ctx = step.context;
            assert!(ctx.n_frames() <= 4);
        }
    }

    #[test]
    fn register_task_appends_mean_rows() {
        let mut model = tiny_model(19);
        let table_id = model.params.id_of("bb.task_emb").unwrap();
        let before = model.params.get(table_id).values().to_vec();
        let h = model.cfg.hidden;
        let n = model.cfg.num_tasks;
        let new_id = model.register_task();
        assert_eq!(new_id, n);
        let after = model.params.get(table_id).values().to_vec();
        assert_eq!(after.len(), before.len() + 2 * h);
        for j in 0..h {
            let mean_obs: f64 = (0..n).map(|t| before[(t * 2) * h + j]).sum::<f64>() / n as f64;
            assert!((after[(n * 2) * h + j] - mean_obs).abs() < 1e-12);
        }
    }
}
