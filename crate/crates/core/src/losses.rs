//! Distributional RL machinery (C51 support, categorical projection, TD
//! targets, CQL regularizer) and the three training objectives: world loss,
//! action loss, and the joint objective, plus target-head management.

use crate::backbone::{
    Backbone, ForwardOutput, HeadRequest, Mode, TargetHeadState, TokenSegment,
};
use crate::config::{AblationFlags, TrainConfig};
use crate::error::{Result, WamError};
use crate::numerics::tape::{Tape, Var};
use crate::rng::Rng64;

/// Categorical distribution over N fixed atoms; Q is its mean.
#[derive(Debug, Clone)]
pub struct ValueDistribution {
    pub probs: Vec<f64>,
    pub support: Vec<f64>,
}

impl ValueDistribution {
    pub fn new(probs: Vec<f64>, support: Vec<f64>) -> Result<ValueDistribution> {
        if probs.len() != support.len() {
            return Err(WamError::contract("probs/support length mismatch"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(WamError::contract(format!(
                "probabilities sum to {}, expected 1",
                sum
            )));
        }
        if probs.iter().any(|&p| p < -1e-12) {
            return Err(WamError::contract("negative probability"));
        }
        Ok(ValueDistribution { probs, support })
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.support)
            .map(|(p, z)| p * z)
            .sum()
    }
}

/// N atoms uniformly spaced on [v_min, v_max].
pub fn atom_support(v_min: f64, v_max: f64, n: usize) -> Result<Vec<f64>> {
    if v_max <= v_min {
        return Err(WamError::contract("v_max must exceed v_min"));
    }
    if n < 2 {
        return Err(WamError::contract("need at least 2 atoms"));
    }
    let dz = (v_max - v_min) / (n - 1) as f64;
    Ok((0..n).map(|i| v_min + i as f64 * dz).collect())
}

/// C51 projection: clamp each shifted atom into the support range and split
/// its mass linearly between the two neighboring support atoms.
pub fn project_categorical(
    target_probs: &[f64],
    shifted_atoms: &[f64],
    support: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(target_probs.len(), shifted_atoms.len());
    let n = support.len();
    let v_min = support[0];
    let v_max = support[n - 1];
    let dz = (v_max - v_min) / (n - 1) as f64;
    let mut out = vec![0.0; n];
    for (&p, &z) in target_probs.iter().zip(shifted_atoms) {
        if p == 0.0 {
            continue;
        }
        let g = z.clamp(v_min, v_max);
        let b = ((g - v_min) / dz).clamp(0.0, (n - 1) as f64);
        let l = b.floor() as usize;
        let u = b.ceil() as usize;
        if l == u {
            out[l] += p;
        } else {
            out[l] += p * (u as f64 - b);
            out[u] += p * (b - l as f64);
        }
    }
    out
}

/// Distributional TD target: project r + gamma * Z(s', a*) onto the support,
/// with a* the argmax of the next-state means over valid actions (lowest id
/// on ties). Terminal transitions project a point mass at r.
pub fn td_target(
    reward: f64,
    done: bool,
    gamma: f64,
    next_probs: Option<&[Vec<f64>]>,
    valid: &[bool],
    support: &[f64],
    argmax_override: Option<usize>,
) -> Result<ValueDistribution> {
    let n = support.len();
    if done {
        let probs = project_categorical(&[1.0], &[reward], support);
        return ValueDistribution::new(probs, support.to_vec());
    }
    let next = next_probs.ok_or_else(|| {
        WamError::contract("non-terminal TD target needs next-state distributions")
    })?;
    let a_star = match argmax_override {
        Some(a) => {
            if !valid.get(a).copied().unwrap_or(false) {
                return Err(WamError::contract("argmax override is not a valid action"));
            }
            a
        }
        None => {
            let mut best = usize::MAX;
            let mut best_q = f64::NEG_INFINITY;
            for (a, probs) in next.iter().enumerate() {
                if !valid[a] {
                    continue;
                }
                let q: f64 = probs.iter().zip(support).map(|(p, z)| p * z).sum();
                if q > best_q {
                    best_q = q;
                    best = a;
                }
            }
            if best == usize::MAX {
                return Err(WamError::contract("no valid action for TD argmax"));
            }
            best
        }
    };
    let shifted: Vec<f64> = support.iter().map(|z| reward + gamma * z).collect();
    debug_assert_eq!(next[a_star].len(), n);
    let probs = project_categorical(&next[a_star], &shifted, support);
    ValueDistribution::new(probs, support.to_vec())
}

/// Hard copy of the online Q-head every `every` steps; no-op otherwise.
pub fn target_sync(
    model: &Backbone,
    target: &mut TargetHeadState,
    step: u64,
    every: u64,
) {
    if every > 0 && step % every == 0 && target.last_sync != step {
        *target = model.snapshot_q_head(step);
    }
}

/// logsumexp over valid actions' Q minus Q of the taken action, as a graph
/// node (gradients flow into the Q means).
pub fn cql_regularizer(
    tape: &mut Tape,
    q_means: Var,
    taken: usize,
    valid: &[bool],
) -> Result<Var> {
    let n = tape.value(q_means).len();
    if taken >= n || !valid[taken] {
        return Err(WamError::contract(format!(
            "taken action {} invalid",
            taken
        )));
    }
    let valid_ids: Vec<usize> = (0..n).filter(|&a| valid[a]).collect();
    let taken_slot = valid_ids.iter().position(|&a| a == taken).unwrap();
    let flat = tape.reshape(q_means, vec![n, 1]);
    let rows = tape.gather_rows(flat, &valid_ids); // [n_valid, 1]
    let row = tape.transpose(rows); // [1, n_valid]
    let lse = tape.logsumexp_rows(row); // [1]
    let taken_q = tape.gather_row_elems(row, &[taken_slot]); // [1]
    Ok(tape.sub(lse, taken_q))
}

/// Everything the loss builders need from one segment's forward pass.
pub struct SegmentGraph<'a> {
    pub seg: &'a TokenSegment,
    pub out: ForwardOutput,
}

/// Head request for a training segment: next-token logits at every
/// position, reward/done logits at action positions, Q logits (online and
/// optionally target) at last-observation positions.
fn segment_request(
    seg: &TokenSegment,
    with_q: bool,
    with_target: bool,
    stop_grad_q_rows: bool,
) -> HeadRequest {
    let l = seg.n_timesteps();
    HeadRequest {
        token_positions: (0..seg.n_positions()).collect(),
        reward_done_positions: (0..l).map(|t| seg.act_pos(t)).collect(),
        q_positions: if with_q {
            (0..l).map(|t| seg.obs_last_pos(t)).collect()
        } else {
            Vec::new()
        },
        q_target: with_q && with_target,
        stop_grad_q_rows,
    }
}

/// Run the full forward pass for a training segment.
pub fn forward_segment(
    tape: &mut Tape,
    model: &Backbone,
    seg: &TokenSegment,
    mode: Mode,
    rng: Option<&mut Rng64>,
    with_q: bool,
    target: Option<&TargetHeadState>,
    stop_grad_q_rows: bool,
) -> Result<ForwardOutput> {
    let seq = seg.sequence(model.cfg.vocab_size);
    let req = segment_request(seg, with_q, target.is_some(), stop_grad_q_rows);
    model.forward(tape, &seq, mode, rng, &req, target)
}

/// One batched trunk pass for a set of segments.
fn forward_segments(
    tape: &mut Tape,
    model: &Backbone,
    segs: &[TokenSegment],
    mode: Mode,
    rng: Option<&mut Rng64>,
    with_q: bool,
    target: Option<&TargetHeadState>,
    stop_grad_q_rows: bool,
) -> Result<Vec<ForwardOutput>> {
    let seqs: Vec<_> = segs
        .iter()
        .map(|s| s.sequence(model.cfg.vocab_size))
        .collect();
    let reqs: Vec<_> = segs
        .iter()
        .map(|s| segment_request(s, with_q, target.is_some(), stop_grad_q_rows))
        .collect();
    model.forward_batch(tape, &seqs, mode, rng, &reqs, target)
}

/// Timesteps whose next-token targets are decodable: the conditioning
/// position must exist and be valid.
fn token_targets(seg: &TokenSegment) -> Vec<(usize, Vec<(usize, usize)>)> {
    let k = seg.tokens_per_frame;
    let mut per_t = Vec::new();
    for t in 0..seg.n_timesteps() {
        if !seg.valid[t] || seg.imagined[t] {
            continue;
        }
        let mut targets = Vec::new();
        for ki in 0..k {
            let (cond_ok, cond_pos) = if ki == 0 {
                if t == 0 || !seg.valid[t - 1] {
                    (false, 0)
                } else {
                    (true, seg.act_pos(t - 1))
                }
            } else {
                (true, seg.obs_pos(t, ki - 1))
            };
            if cond_ok {
                targets.push((cond_pos, seg.frames[t][ki] as usize));
            }
        }
        if !targets.is_empty() {
            per_t.push((t, targets));
        }
    }
    per_t
}

pub struct WorldLossParts {
    pub loss: Var,
    /// Token, reward and termination cross-entropy averages (diagnostics).
    pub token_ce: f64,
    pub reward_ce: f64,
    pub done_ce: f64,
    /// Next-token top-1 hits and counts over this segment.
    pub token_hits: usize,
    pub token_count: usize,
}

/// World-part loss for one segment: mean over valid timesteps of
/// [mean over decodable tokens of next-token CE] + reward CE + done CE.
/// Pad and imagined timesteps contribute nothing.
pub fn world_loss(
    tape: &mut Tape,
    seg: &TokenSegment,
    out: &ForwardOutput,
) -> Result<WorldLossParts> {
    let token_logits = out
        .token_logits
        .ok_or_else(|| WamError::contract("world loss needs token logits"))?;
    let reward_logits = out
        .reward_logits
        .ok_or_else(|| WamError::contract("world loss needs reward logits"))?;
    let done_logits = out
        .done_logits
        .ok_or_else(|| WamError::contract("world loss needs done logits"))?;

    let mut timestep_terms: Vec<Var> = Vec::new();
    let mut token_ce_sum = 0.0;
    let mut reward_ce_sum = 0.0;
    let mut done_ce_sum = 0.0;
    let mut token_hits = 0usize;
    let mut token_count = 0usize;
    let targets = token_targets(seg);
    let vocab = tape.shape(token_logits)[1];

    // Token terms, grouped per timestep so each timestep contributes the
    // mean over its decodable tokens.
    let mut token_term_of_t: std::collections::BTreeMap<usize, Var> =
        std::collections::BTreeMap::new();
    for (t, list) in &targets {
        let positions: Vec<usize> = list.iter().map(|&(p, _)| p).collect();
        let ids: Vec<usize> = list.iter().map(|&(_, id)| id).collect();
        let rows = tape.gather_rows(token_logits, &positions);
        let ls = tape.log_softmax_rows(rows);
        // top-1 accuracy bookkeeping
        {
            let vals = tape.value(rows);
            for (i, &id) in ids.iter().enumerate() {
                let row = &vals[i * vocab..(i + 1) * vocab];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                token_hits += (best == id) as usize;
                token_count += 1;
            }
        }
        let picked = tape.gather_row_elems(ls, &ids);
        let nll = tape.scale(picked, -1.0);
        let m = tape.mean(nll);
        token_ce_sum += tape.scalar_value(m);
        token_term_of_t.insert(*t, m);
    }

    let mut n_timesteps = 0usize;
    for t in 0..seg.n_timesteps() {
        if !seg.valid[t] || seg.imagined[t] {
            continue;
        }
        n_timesteps += 1;
        let mut term: Option<Var> = token_term_of_t.get(&t).copied();
        // Reward CE (3 classes) and termination CE (2 classes) at the action
        // position of this timestep.
        let r_row = tape.gather_rows(reward_logits, &[t]);
        let r_ls = tape.log_softmax_rows(r_row);
        let r_class = (seg.ternary[t] + 1) as usize;
        let r_pick = tape.gather_row_elems(r_ls, &[r_class]);
        let r_nll = tape.scale(r_pick, -1.0);
        let r_m = tape.mean(r_nll);
        reward_ce_sum += tape.scalar_value(r_m);
        term = Some(match term {
            Some(v) => tape.add(v, r_m),
            None => r_m,
        });
        let d_row = tape.gather_rows(done_logits, &[t]);
        let d_ls = tape.log_softmax_rows(d_row);
        // The termination head models dynamics termination; step-limit
        // truncations train as "not done".
        let d_class = (seg.done[t] && !seg.truncated[t]) as usize;
        let d_pick = tape.gather_row_elems(d_ls, &[d_class]);
        let d_nll = tape.scale(d_pick, -1.0);
        let d_m = tape.mean(d_nll);
        done_ce_sum += tape.scalar_value(d_m);
        let combined = tape.add(term.unwrap(), d_m);
        timestep_terms.push(combined);
    }
    if timestep_terms.is_empty() {
        return Err(WamError::contract("segment has no valid timesteps"));
    }
    let mut acc = timestep_terms[0];
    for &v in &timestep_terms[1..] {
        acc = tape.add(acc, v);
    }
    let loss = tape.scale(acc, 1.0 / n_timesteps as f64);
    Ok(WorldLossParts {
        loss,
        token_ce: token_ce_sum / targets.len().max(1) as f64,
        reward_ce: reward_ce_sum / n_timesteps as f64,
        done_ce: done_ce_sum / n_timesteps as f64,
        token_hits,
        token_count,
    })
}

pub struct ActionLossParts {
    pub loss: Var,
    pub cql_value: f64,
    pub kl_value: f64,
    /// Number of timesteps contributing TD terms.
    pub n_terms: usize,
}

/// Action-part loss for one segment: alpha * CQL + KL(projected target ||
/// online) averaged over timesteps with a computable TD target (done, or a
/// valid successor frame inside the segment).
#[allow(clippy::too_many_arguments)]
pub fn action_loss(
    tape: &mut Tape,
    seg: &TokenSegment,
    out: &ForwardOutput,
    support: &[f64],
    gamma: f64,
    alpha: f64,
    valid_actions: &[bool],
    ablation: &AblationFlags,
    double_q: bool,
) -> Result<ActionLossParts> {
    let q_logits = out
        .q_logits
        .ok_or_else(|| WamError::contract("action loss needs q logits"))?;
    let n_atoms = support.len();
    let a_max = valid_actions.len();
    let l = seg.n_timesteps();

    // Materialized target-head distributions at every timestep.
    let target_probs: Option<Vec<Vec<Vec<f64>>>> = out.q_target_logits.map(|tl| {
        let vals = tape.value(tl);
        (0..l)
            .map(|t| {
                (0..a_max)
                    .map(|a| {
                        let row = &vals[(t * a_max + a) * n_atoms..(t * a_max + a + 1) * n_atoms];
                        softmax_slice(row)
                    })
                    .collect()
            })
            .collect()
    });
    let online_vals = tape.value(q_logits).to_vec();

    let support_col = tape.leaf(vec![n_atoms, 1], support.to_vec());
    let mut terms: Vec<Var> = Vec::new();
    let mut cql_sum = 0.0;
    let mut kl_sum = 0.0;
    for t in 0..l {
        if !seg.valid[t] {
            continue;
        }
        let action = seg.actions[t] as usize;
        if action >= a_max || !valid_actions[action] {
            continue;
        }
        if seg.truncated[t] {
            // Truncated by the step limit: no successor stored and the
            // state is not terminal, so the transition is censored.
            continue;
        }
        let has_next = t + 1 < l && seg.valid[t + 1];
        if !seg.done[t] && !has_next {
            continue;
        }
        // Target distribution (constant).
        let target = if seg.done[t] {
            td_target(
                seg.ternary[t] as f64,
                true,
                gamma,
                None,
                valid_actions,
                support,
                None,
            )?
        } else {
            let probs = target_probs
                .as_ref()
                .ok_or_else(|| WamError::contract("action loss needs target head outputs"))?;
            let argmax_override = if double_q {
                // Online-head argmax at t+1.
                let mut best = usize::MAX;
                let mut best_q = f64::NEG_INFINITY;
                for a in 0..a_max {
                    if !valid_actions[a] {
                        continue;
                    }
                    let row = &online_vals
                        [((t + 1) * a_max + a) * n_atoms..((t + 1) * a_max + a + 1) * n_atoms];
                    let p = softmax_slice(row);
                    let q: f64 = p.iter().zip(support).map(|(p, z)| p * z).sum();
                    if q > best_q {
                        best_q = q;
                        best = a;
                    }
                }
                Some(best)
            } else {
                None
            };
            td_target(
                seg.ternary[t] as f64,
                false,
                gamma,
                Some(&probs[t + 1]),
                valid_actions,
                support,
                argmax_override,
            )?
        };

        // Online distribution logits for this timestep: [a_max, n_atoms].
        let row = tape.gather_rows(q_logits, &[t]);
        let grid = tape.reshape(row, vec![a_max, n_atoms]);
        let log_probs = tape.log_softmax_rows(grid);

        let td_term = if ablation.mse_td {
            // Mean-square TD on the distribution means.
            let probs = tape.softmax_rows(grid);
            let q_col = tape.matmul(probs, support_col); // [a_max, 1]
            let q_row = tape.reshape(q_col, vec![1, a_max]);
            let q_taken = tape.gather_row_elems(q_row, &[action]);
            let target_mean = tape.scalar(target.mean());
            let diff = tape.sub(q_taken, target_mean);
            let sq = tape.mul(diff, diff);
            let m = tape.mean(sq);
            kl_sum += tape.scalar_value(m);
            m
        } else {
            // KL(target || online) with the target fixed: entropy term plus
            // cross-entropy so KL(p || p) = 0 exactly.
            let entropy: f64 = target
                .probs
                .iter()
                .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
                .sum();
            let taken_row = tape.gather_rows(log_probs, &[action]); // [1, n_atoms]
            let t_row = tape.leaf(vec![1, n_atoms], target.probs.clone());
            let prod = tape.mul(t_row, taken_row);
            let cross = tape.sum(prod);
            let neg_cross = tape.scale(cross, -1.0);
            let ent = tape.scalar(entropy);
            let kl = tape.add(ent, neg_cross);
            kl_sum += tape.scalar_value(kl);
            kl
        };

        let term = if ablation.no_cql {
            td_term
        } else {
            let probs = tape.softmax_rows(grid);
            let q_col = tape.matmul(probs, support_col);
            let q_flat = tape.reshape(q_col, vec![a_max]);
            let cql = cql_regularizer(tape, q_flat, action, valid_actions)?;
            cql_sum += tape.scalar_value(cql);
            let scaled = tape.scale(cql, alpha);
            tape.add(scaled, td_term)
        };
        terms.push(term);
    }
    if terms.is_empty() {
        // A one-timestep non-terminal window has no computable TD target;
        // it contributes nothing to the action loss.
        let zero = tape.scalar(0.0);
        return Ok(ActionLossParts {
            loss: zero,
            cql_value: 0.0,
            kl_value: 0.0,
            n_terms: 0,
        });
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &v in &terms[1..] {
        acc = tape.add(acc, v);
    }
    let loss = tape.scale(acc, 1.0 / n as f64);
    Ok(ActionLossParts {
        loss,
        cql_value: cql_sum / n as f64,
        kl_value: kl_sum / n as f64,
        n_terms: n,
    })
}

fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Weighted components of the joint objective; they sum to the total.
#[derive(Debug, Clone, Copy, Default)]
pub struct JointLossParts {
    pub world: f64,
    pub cql: f64,
    pub kl: f64,
    pub total: f64,
    pub token_accuracy: f64,
}

/// beta * L_world + L_action over a batch of segments, built on one tape.
/// Gradients from both parts reach the shared backbone unless an ablation
/// flag severs one path.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_batch(
    tape: &mut Tape,
    model: &Backbone,
    segs: &[TokenSegment],
    target: &TargetHeadState,
    support: &[f64],
    train_cfg: &TrainConfig,
    valid_masks: &[Vec<bool>],
    mode: Mode,
    rng: Option<&mut Rng64>,
) -> Result<(Var, JointLossParts)> {
    if segs.is_empty() {
        return Err(WamError::contract("empty batch"));
    }
    let mut world_terms = Vec::new();
    let mut action_terms = Vec::new();
    let mut parts = JointLossParts::default();
    let mut hits = 0usize;
    let mut count = 0usize;
    let outs = forward_segments(
        tape,
        model,
        segs,
        mode,
        rng,
        true,
        Some(target),
        train_cfg.ablation.stop_grad_action,
    )?;
    for (seg, out) in segs.iter().zip(&outs) {
        if !train_cfg.ablation.no_world_loss {
            let w = world_loss(tape, seg, out)?;
            hits += w.token_hits;
            count += w.token_count;
            world_terms.push(w.loss);
        }
        let a = action_loss(
            tape,
            seg,
            out,
            support,
            train_cfg.gamma,
            train_cfg.alpha,
            &valid_masks[seg.task],
            &train_cfg.ablation,
            train_cfg.double_q,
        )?;
        if a.n_terms > 0 {
            action_terms.push((a.loss, a.cql_value, a.kl_value));
        }
    }
    if action_terms.is_empty() {
        return Err(WamError::contract(
            "no segment in the batch has a computable TD target",
        ));
    }
    for (_, cql_value, kl_value) in &action_terms {
        parts.cql += train_cfg.alpha * cql_value / action_terms.len() as f64;
        parts.kl += kl_value / action_terms.len() as f64;
    }
    let mean_terms = |tape: &mut Tape, terms: &[Var]| -> Option<Var> {
        if terms.is_empty() {
            return None;
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t);
        }
        Some(tape.scale(acc, 1.0 / terms.len() as f64))
    };
    let action_vars: Vec<Var> = action_terms.iter().map(|(v, _, _)| *v).collect();
    let action_mean = mean_terms(tape, &action_vars).expect("checked nonempty");
    let total = match mean_terms(tape, &world_terms) {
        Some(world_mean) => {
            parts.world = train_cfg.beta * tape.scalar_value(world_mean);
            let scaled = tape.scale(world_mean, train_cfg.beta);
            tape.add(scaled, action_mean)
        }
        None => action_mean,
    };
    parts.total = tape.scalar_value(total);
    parts.token_accuracy = if count > 0 {
        hits as f64 / count as f64
    } else {
        0.0
    };
    Ok((total, parts))
}

/// World-part loss alone over a batch (stage 1).
pub fn world_loss_batch(
    tape: &mut Tape,
    model: &Backbone,
    segs: &[TokenSegment],
    mode: Mode,
    rng: Option<&mut Rng64>,
) -> Result<(Var, f64, f64)> {
    if segs.is_empty() {
        return Err(WamError::contract("empty batch"));
    }
    let mut terms = Vec::new();
    let mut hits = 0;
    let mut count = 0;
    let outs = forward_segments(tape, model, segs, mode, rng, false, None, false)?;
    for (seg, out) in segs.iter().zip(&outs) {
        let w = world_loss(tape, seg, out)?;
        hits += w.token_hits;
        count += w.token_count;
        terms.push(w.loss);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    let loss = tape.scale(acc, 1.0 / terms.len() as f64);
    let value = tape.scalar_value(loss);
    let acc_frac = if count > 0 {
        hits as f64 / count as f64
    } else {
        0.0
    };
    Ok((loss, value, acc_frac))
}
