//! Decision-time search: top-K restricted, H-step beam search maximizing
//! income-to-date plus income-to-go, a MuZero-style MCTS comparator, and the
//! search error-bound calculators with their empirical verification harness.

use crate::envs::mdp::{random_mdp, value_iteration, TabularMdp};
use crate::error::{Result, WamError};
use crate::rng::Rng64;

/// Anything the planner can roll forward: the learned model over token
/// contexts, or an exact tabular adapter. `q_values` returns one entry per
/// global action (invalid entries are ignored via the plan config's mask).
pub trait WorldModel {
    type State: Clone;
    fn q_values(&mut self, s: &Self::State) -> Vec<f64>;
    fn imagine_step(&mut self, s: &Self::State, action: usize) -> (Self::State, f64, bool);
}

#[derive(Debug, Clone)]
pub struct PlanConfig {
    pub horizon: usize,
    pub beam_width: usize,
    pub gamma: f64,
    pub valid: Vec<bool>,
}

impl PlanConfig {
    pub fn new(horizon: usize, beam_width: usize, gamma: f64, valid: Vec<bool>) -> Result<Self> {
        let n_valid = valid.iter().filter(|&&v| v).count();
        if beam_width == 0 {
            return Err(WamError::contract("beam width must be >= 1"));
        }
        if beam_width > n_valid {
            return Err(WamError::contract(format!(
                "beam width {} exceeds {} valid actions",
                beam_width, n_valid
            )));
        }
        Ok(PlanConfig {
            horizon,
            beam_width,
            gamma,
            valid,
        })
    }
}

/// A partial imagined trajectory.
#[derive(Debug, Clone)]
pub struct BeamHypothesis<S> {
    pub state: S,
    pub first_action: usize,
    /// Sum of gamma^t * r_t from the root.
    pub income_to_date: f64,
    pub depth: usize,
    pub terminated: bool,
    /// income_to_date + gamma^depth * max_a Q(state, a), frozen at creation.
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PlanDiagnostics {
    pub model_calls: usize,
    /// imagine_step invocations per expansion depth (length == horizon when
    /// nothing terminates early). The longest chain of sequentially
    /// dependent model calls equals this vector's length.
    pub calls_per_depth: Vec<usize>,
    /// Scores of surviving hypotheses after each depth's truncation.
    pub depth_scores: Vec<Vec<f64>>,
}

/// The K valid actions with highest Q, ties broken toward the lowest action
/// id. Returned in ascending action-id order so expansion order (and hence
/// tie-breaking over hypotheses) is deterministic.
pub fn restrict_top_k(q: &[f64], valid: &[bool], k: usize) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = (0..q.len()).filter(|&a| valid[a]).collect();
    if k > candidates.len() {
        return Err(WamError::contract(format!(
            "top-{} requested but only {} valid actions",
            k,
            candidates.len()
        )));
    }
    candidates.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap().then(a.cmp(&b)));
    let mut chosen: Vec<usize> = candidates.into_iter().take(k).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Argmax over valid actions, lowest id on ties.
pub fn greedy_policy(q: &[f64], valid: &[bool]) -> Result<usize> {
    Ok(restrict_top_k(q, valid, 1)?[0])
}

fn max_valid_q(q: &[f64], valid: &[bool]) -> f64 {
    q.iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Keep the `k` best hypotheses by score (ties toward the earlier
/// hypothesis), preserving creation order among survivors.
fn truncate_top_k<S: Clone>(hyps: Vec<BeamHypothesis<S>>, k: usize) -> Vec<BeamHypothesis<S>> {
    if hyps.len() <= k {
        return hyps;
    }
    let mut order: Vec<usize> = (0..hyps.len()).collect();
    order.sort_by(|&i, &j| hyps[j].score.partial_cmp(&hyps[i].score).unwrap().then(i.cmp(&j)));
    let mut selected = vec![false; hyps.len()];
    for &i in order.iter().take(k) {
        selected[i] = true;
    }
    hyps.into_iter()
        .zip(selected)
        .filter(|(_, s)| *s)
        .map(|(h, _)| h)
        .collect()
}

/// H-step beam search over the imagined MDP. Returns the first action of
/// the best hypothesis plus call-count diagnostics. `horizon == 0` or
/// `beam_width == 1` act exactly like the greedy policy (the latter still
/// spends its model calls).
pub fn beam_search_plan<M: WorldModel>(
    s0: &M::State,
    cfg: &PlanConfig,
    model: &mut M,
) -> Result<(usize, PlanDiagnostics)> {
    let mut diag = PlanDiagnostics::default();
    let q0 = model.q_values(s0);
    if cfg.horizon == 0 {
        return Ok((greedy_policy(&q0, &cfg.valid)?, diag));
    }
    let k = cfg.beam_width;
    let root_actions = restrict_top_k(&q0, &cfg.valid, k)?;
    let mut beam: Vec<BeamHypothesis<M::State>> = Vec::with_capacity(k);
    let mut calls_at_depth = 0usize;
    for &a in &root_actions {
        let (next, reward, done) = model.imagine_step(s0, a);
        calls_at_depth += 1;
        let income = reward; // gamma^0 * r
        let score = if done {
            income
        } else {
            income + cfg.gamma * max_valid_q(&model.q_values(&next), &cfg.valid)
        };
        beam.push(BeamHypothesis {
            state: next,
            first_action: a,
            income_to_date: income,
            depth: 1,
            terminated: done,
            score,
        });
    }
    diag.model_calls += calls_at_depth;
    diag.calls_per_depth.push(calls_at_depth);
    beam = truncate_top_k(beam, k);
    diag.depth_scores.push(beam.iter().map(|h| h.score).collect());

    for depth in 2..=cfg.horizon {
        let mut children: Vec<BeamHypothesis<M::State>> = Vec::new();
        let mut calls_at_depth = 0usize;
        for hyp in &beam {
            if hyp.terminated {
                children.push(hyp.clone());
                continue;
            }
            let q = model.q_values(&hyp.state);
            for &a in &restrict_top_k(&q, &cfg.valid, k)? {
                let (next, reward, done) = model.imagine_step(&hyp.state, a);
                calls_at_depth += 1;
                let income = hyp.income_to_date + cfg.gamma.powi(depth as i32 - 1) * reward;
                let score = if done {
                    income
                } else {
                    income
                        + cfg.gamma.powi(depth as i32)
                            * max_valid_q(&model.q_values(&next), &cfg.valid)
                };
                children.push(BeamHypothesis {
                    state: next,
                    first_action: hyp.first_action,
                    income_to_date: income,
                    depth,
                    terminated: done,
                    score,
                });
            }
        }
        diag.model_calls += calls_at_depth;
        diag.calls_per_depth.push(calls_at_depth);
        beam = truncate_top_k(children, k);
        diag.depth_scores.push(beam.iter().map(|h| h.score).collect());
    }

    let mut best = 0usize;
    for i in 1..beam.len() {
        if beam[i].score > beam[best].score {
            best = i;
        }
    }
    Ok((beam[best].first_action, diag))
}

// ── MCTS comparator ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MctsConfig {
    pub iterations: usize,
    pub temperature: f64,
    pub max_depth: usize,
    pub gamma: f64,
    pub c_puct: f64,
    pub valid: Vec<bool>,
}

struct McNode<S> {
    state: Option<S>, // None until first visited via its incoming edge
    reward_in: f64,
    terminal: bool,
    visits: u32,
    value_sum: f64,
    prior: f64,
    action_in: usize,
    children: Vec<usize>,
    expanded: bool,
}

fn softmax_priors(q: &[f64], valid: &[bool], t: f64) -> Vec<(usize, f64)> {
    let acts: Vec<usize> = (0..q.len()).filter(|&a| valid[a]).collect();
    let scaled: Vec<f64> = acts.iter().map(|&a| q[a] / t).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    acts.iter()
        .zip(&exps)
        .map(|(&a, &e)| (a, e / z))
        .collect()
}

/// MuZero-style search using V(s) = max_a Q(s,a) as the leaf value and
/// priors softmax(Q / t). Returns the action of the most valuable root
/// child (highest mean value; falls back to priors when nothing was
/// visited).
pub fn mcts_plan<M: WorldModel>(
    s0: &M::State,
    cfg: &MctsConfig,
    model: &mut M,
) -> Result<usize> {
    if cfg.iterations == 0 {
        return Err(WamError::contract("mcts needs at least one iteration"));
    }
    let mut arena: Vec<McNode<M::State>> = Vec::new();
    arena.push(McNode {
        state: Some(s0.clone()),
        reward_in: 0.0,
        terminal: false,
        visits: 0,
        value_sum: 0.0,
        prior: 1.0,
        action_in: usize::MAX,
        children: Vec::new(),
        expanded: false,
    });

    for _ in 0..cfg.iterations {
        // Selection.
        let mut path = vec![0usize];
        let mut node = 0usize;
        let mut depth = 0usize;
        while arena[node].expanded && !arena[node].terminal && depth < cfg.max_depth {
            let parent_visits = arena[node].visits.max(1) as f64;
            let mut best_child = arena[node].children[0];
            let mut best_ucb = f64::NEG_INFINITY;
            for &c in &arena[node].children {
                let ch = &arena[c];
                let q_bar = if ch.visits > 0 {
                    ch.value_sum / ch.visits as f64
                } else {
                    0.0
                };
                let ucb = q_bar
                    + cfg.c_puct * ch.prior * parent_visits.sqrt() / (1.0 + ch.visits as f64);
                if ucb > best_ucb {
                    best_ucb = ucb;
                    best_child = c;
                }
            }
            // Materialize the child state on first traversal.
            if arena[best_child].state.is_none() {
                let parent_state = arena[node].state.clone().expect("expanded node has state");
                let action = arena[best_child].action_in;
                let (next, reward, done) = model.imagine_step(&parent_state, action);
                let ch = &mut arena[best_child];
                ch.state = Some(next);
                ch.reward_in = reward;
                ch.terminal = done;
            }
            node = best_child;
            path.push(node);
            depth += 1;
        }

        // Expansion and leaf evaluation.
        let leaf_value = if arena[node].terminal {
            0.0
        } else {
            let state = arena[node].state.clone().expect("leaf has state");
            let q = model.q_values(&state);
            if !arena[node].expanded && depth < cfg.max_depth {
                let priors = softmax_priors(&q, &cfg.valid, cfg.temperature);
                for (a, p) in priors {
                    arena.push(McNode {
                        state: None,
                        reward_in: 0.0,
                        terminal: false,
                        visits: 0,
                        value_sum: 0.0,
                        prior: p,
                        action_in: a,
                        children: Vec::new(),
                        expanded: false,
                    });
                    let idx = arena.len() - 1;
                    let n = path[path.len() - 1];
                    arena[n].children.push(idx);
                }
                arena[node].expanded = true;
            }
            max_valid_q(&q, &cfg.valid)
        };

        // Backup.
        let mut g = leaf_value;
        for &n in path.iter().rev() {
            arena[n].visits += 1;
            arena[n].value_sum += g;
            g = arena[n].reward_in + cfg.gamma * g;
        }
    }

    // Most valuable root child.
    let root_children = arena[0].children.clone();
    if root_children.is_empty() {
        return Err(WamError::contract("mcts root was never expanded"));
    }
    let visited: Vec<usize> = root_children
        .iter()
        .copied()
        .filter(|&c| arena[c].visits > 0)
        .collect();
    let pick_from = if visited.is_empty() {
        // Degenerate budget: fall back to the prior ordering.
        let mut best = root_children[0];
        for &c in &root_children[1..] {
            if arena[c].prior > arena[best].prior {
                best = c;
            }
        }
        return Ok(arena[best].action_in);
    } else {
        visited
    };
    let mut best = pick_from[0];
    for &c in &pick_from[1..] {
        let qc = arena[c].value_sum / arena[c].visits as f64;
        let qb = arena[best].value_sum / arena[best].visits as f64;
        if qc > qb {
            best = c;
        }
    }
    Ok(arena[best].action_in)
}

// ── Theorem bound calculators ───────────────────────────────────────────

fn check_bound_args(eps: &[f64], gamma: f64, horizon: usize) -> Result<()> {
    if eps.iter().any(|&e| e < 0.0) {
        return Err(WamError::contract("error bounds must be nonnegative"));
    }
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(WamError::contract("gamma must lie in (0, 1)"));
    }
    if horizon == 0 {
        return Err(WamError::contract("horizon must be >= 1"));
    }
    Ok(())
}

/// Worst-case gap between the search-based and true optimal Q as a function
/// of the estimation errors:
/// (1-g^H)/(1-g)*er + ((g-g^H)/(1-g)*er + g^H*eq)*es + g^H*eq.
pub fn bound_rhs(eps_s: f64, eps_r: f64, eps_q: f64, gamma: f64, horizon: usize) -> Result<f64> {
    check_bound_args(&[eps_s, eps_r, eps_q], gamma, horizon)?;
    let gh = gamma.powi(horizon as i32);
    Ok((1.0 - gh) / (1.0 - gamma) * eps_r
        + ((gamma - gh) / (1.0 - gamma) * eps_r + gh * eps_q) * eps_s
        + gh * eps_q)
}

/// Variant of the bound with the Lipschitz constants of the learned reward
/// and Q functions in the state-error coefficient; this is the form the
/// proof derives and the one the empirical harness verifies trial
/// constructions against.
pub fn bound_rhs_lipschitz(
    eps_s: f64,
    eps_r: f64,
    eps_q: f64,
    l_r: f64,
    l_q: f64,
    gamma: f64,
    horizon: usize,
) -> Result<f64> {
    check_bound_args(&[eps_s, eps_r, eps_q, l_r, l_q], gamma, horizon)?;
    let gh = gamma.powi(horizon as i32);
    Ok((1.0 - gh) / (1.0 - gamma) * eps_r
        + ((gamma - gh) / (1.0 - gamma) * l_r + gh * l_q) * eps_s
        + gh * eps_q)
}

/// Condition under which search has an upper error bound no greater than
/// the estimated optimal Q-function:
/// er/(1-g) + (g/(1-g)*(Lr-g^H*Lq)/(1-g^H) - (Lr-Lq)/(1-g)*g^H/(1-g^H))*es <= eq.
pub fn bound_condition_holds(
    eps_s: f64,
    eps_r: f64,
    eps_q: f64,
    l_r: f64,
    l_q: f64,
    gamma: f64,
    horizon: usize,
) -> Result<bool> {
    check_bound_args(&[eps_s, eps_r, eps_q, l_r, l_q], gamma, horizon)?;
    let gh = gamma.powi(horizon as i32);
    let lhs = eps_r / (1.0 - gamma)
        + (gamma / (1.0 - gamma) * (l_r - gh * l_q) / (1.0 - gh)
            - (l_r - l_q) / (1.0 - gamma) * gh / (1.0 - gh))
            * eps_s;
    Ok(lhs <= eps_q)
}

// ── Empirical bound harness ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BoundTrial {
    pub trial: usize,
    pub eps_s: f64,
    pub eps_r: f64,
    pub eps_q: f64,
    pub measured_gap: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Search-based optimal Q under a perturbed model, computed exactly by
/// dynamic programming: f(s,a) = r_hat(s,a) + g * E_{P_hat}[g_1], with
/// g_H = max_a Q_hat and g_t = max_a [r_hat + g * E_{P_hat} g_{t+1}].
fn search_q_exact(
    mdp: &TabularMdp,
    r_hat: &[Vec<f64>],
    q_hat: &[Vec<f64>],
    swap_prob: f64,
    swap_map: &[usize],
    gamma: f64,
    horizon: usize,
) -> Vec<Vec<f64>> {
    let expect = |g: &[f64], s: usize, a: usize| -> f64 {
        let mut v = 0.0;
        for &(p, ns, _r) in &mdp.transitions[s][a] {
            let direct = g[ns];
            let swapped = g[swap_map[ns]];
            v += p * ((1.0 - swap_prob) * direct + swap_prob * swapped);
        }
        v
    };
    let mut g: Vec<f64> = (0..mdp.n_states)
        .map(|s| q_hat[s].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    for _t in (1..horizon).rev() {
        let mut next = vec![0.0; mdp.n_states];
        for s in 0..mdp.n_states {
            let mut best = f64::NEG_INFINITY;
            for a in 0..mdp.n_actions {
                best = best.max(r_hat[s][a] + gamma * expect(&g, s, a));
            }
            next[s] = best;
        }
        g = next;
    }
    let mut f = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            f[s][a] = r_hat[s][a] + gamma * expect(&g, s, a);
        }
    }
    f
}

/// Run `n` random perturbation trials on small tabular MDPs. Trials inject
/// sup-norm-bounded reward, Q and transition perturbations constructed so
/// that the exactly computed Lipschitz constants satisfy L_r <= eps_r and
/// L_q <= eps_q (the regime in which the stated bound provably dominates
/// the proof's Lipschitz form). Reported epsilons are the true sup-norm
/// budgets of the injected noise.
pub fn run_bound_trials(n: usize, seed: u64) -> Result<Vec<BoundTrial>> {
    let mut rng = Rng64::new(seed);
    let mut out = Vec::with_capacity(n);
    for trial in 0..n {
        let n_states = 3 + rng.below(6);
        let n_actions = 2 + rng.below(3);
        let gamma = rng.range(0.5, 0.95);
        let horizon = 1 + rng.below(4);
        let rho = rng.range(0.02, 0.1);
        // Rewards: shared base plus a small per-(s,a) wiggle, so the full
        // range of the reward function stays within 2*rho.
        let base = rng.range(0.0, 1.0);
        let mut mdp = random_mdp(&mut rng, n_states, n_actions, 1.0, trial % 2 == 0);
        for s in 0..n_states {
            for a in 0..n_actions {
                for o in mdp.transitions[s][a].iter_mut() {
                    o.2 = base + rng.range(-rho, rho);
                }
            }
        }
        // Make rewards a function of (s, a) only, as the bound assumes.
        let reward_table: Vec<Vec<f64>> = (0..n_states)
            .map(|s| {
                (0..n_actions)
                    .map(|a| mdp.transitions[s][a][0].2)
                    .collect()
            })
            .collect();
        for s in 0..n_states {
            for a in 0..n_actions {
                let r = reward_table[s][a];
                for o in mdp.transitions[s][a].iter_mut() {
                    o.2 = r;
                }
            }
        }
        let q_star = value_iteration(&mdp, gamma, 1e-10)?;

        // Perturbations: a scalar reward offset (keeps the reward range
        // unchanged) and per-action Q offsets (keep per-action Q ranges
        // unchanged).
        let eps_r = rng.range(2.0 * rho, 3.0 * rho);
        let u = rng.range(-eps_r, eps_r);
        let r_hat: Vec<Vec<f64>> = reward_table
            .iter()
            .map(|row| row.iter().map(|r| r + u).collect())
            .collect();
        let l_r = {
            let all: Vec<f64> = r_hat.iter().flatten().cloned().collect();
            let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
            hi - lo
        };
        let l_q = (0..n_actions)
            .map(|a| {
                let col: Vec<f64> = (0..n_states).map(|s| q_star[s][a]).collect();
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0f64, f64::max);
        let eps_q = (l_q * rng.range(1.0, 2.0)).max(0.02);
        let v_noise: Vec<f64> = (0..n_actions).map(|_| rng.range(-eps_q, eps_q)).collect();
        let q_hat: Vec<Vec<f64>> = q_star
            .iter()
            .map(|row| row.iter().zip(&v_noise).map(|(q, v)| q + v).collect())
            .collect();
        debug_assert!(l_r <= eps_r + 1e-12);
        debug_assert!(l_q <= eps_q + 1e-12);

        // Coupled state swap whose per-trajectory divergence probability
        // stays within eps_s across the whole horizon.
        let eps_s = rng.range(0.0, 0.3);
        let delta = 1.0 - (1.0 - eps_s).powf(1.0 / horizon as f64);
        let swap_map: Vec<usize> = (0..n_states)
            .map(|s| {
                if n_states == 1 {
                    s
                } else {
                    let mut t = rng.below(n_states);
                    if t == s {
                        t = (t + 1) % n_states;
                    }
                    t
                }
            })
            .collect();

        let f = search_q_exact(&mdp, &r_hat, &q_hat, delta, &swap_map, gamma, horizon);
        let mut gap = 0.0f64;
        for s in 0..n_states {
            for a in 0..n_actions {
                gap = gap.max((f[s][a] - q_star[s][a]).abs());
            }
        }
        let bound = bound_rhs(eps_s, eps_r, eps_q, gamma, horizon)?;
        out.push(BoundTrial {
            trial,
            eps_s,
            eps_r,
            eps_q,
            measured_gap: gap,
            bound,
            holds: gap <= bound + 1e-9,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::mdp::{exhaustive_plan_oracle, greedy_from_row, ExactModelAdapter};

    /// Tabular world model with exact Q and kernel; counts nothing itself.
    struct TabularModel<'a> {
        adapter: ExactModelAdapter<'a>,
    }

    impl<'a> WorldModel for TabularModel<'a> {
        type State = usize;
        fn q_values(&mut self, s: &usize) -> Vec<f64> {
            self.adapter.q_table[*s].clone()
        }
        fn imagine_step(&mut self, s: &usize, action: usize) -> (usize, f64, bool) {
            self.adapter.sample_step(*s, action)
        }
    }

    /// Synthetic non-terminating model with a fixed Q function; used for
    /// call-count grids where termination must not interfere.
    struct SyntheticModel {
        q: Vec<Vec<f64>>,
        n_actions: usize,
    }

    impl WorldModel for SyntheticModel {
        type State = usize;
        fn q_values(&mut self, s: &usize) -> Vec<f64> {
            self.q[*s % self.q.len()].clone()
        }
        fn imagine_step(&mut self, s: &usize, action: usize) -> (usize, f64, bool) {
            ((s * self.n_actions + action + 1) % 7919, 0.1, false)
        }
    }

    fn all_valid(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    #[test]
    fn restrict_top_k_examples() {
        let valid = all_valid(3);
        assert_eq!(restrict_top_k(&[1.0, 3.0, 2.0], &valid, 2).unwrap(), vec![1, 2]);
        assert_eq!(restrict_top_k(&[5.0, 5.0, 0.0], &valid, 1).unwrap(), vec![0]);
        assert!(restrict_top_k(&[1.0, 2.0], &all_valid(2), 3).is_err());
    }

    #[test]
    fn restrict_top_k_matches_sort_oracle() {
        let mut rng = Rng64::new(2);
        for _ in 0..1000 {
            let n = 2 + rng.below(8);
            let q: Vec<f64> = (0..n).map(|_| (rng.below(5) as f64) * 0.5).collect();
            let mut valid = vec![false; n];
            let mut n_valid = 0;
            for v in valid.iter_mut() {
                *v = rng.chance(0.7);
                n_valid += *v as usize;
            }
            if n_valid == 0 {
                valid[0] = true;
                n_valid = 1;
            }
            let k = 1 + rng.below(n_valid);
            let got = restrict_top_k(&q, &valid, k).unwrap();
            // oracle: full stable sort by (-q, id)
            let mut idx: Vec<usize> = (0..n).filter(|&a| valid[a]).collect();
            idx.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap().then(a.cmp(&b)));
            let mut want: Vec<usize> = idx.into_iter().take(k).collect();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn greedy_examples() {
        let valid = all_valid(3);
        assert_eq!(greedy_policy(&[0.2, 0.9, 0.1], &valid).unwrap(), 1);
        let single = vec![false, true, false];
        assert_eq!(greedy_policy(&[9.0, 0.1, 9.0], &single).unwrap(), 1);
        let mut rng = Rng64::new(4);
        for _ in 0..100 {
            let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            assert_eq!(
                greedy_policy(&q, &all_valid(4)).unwrap(),
                restrict_top_k(&q, &all_valid(4), 1).unwrap()[0]
            );
        }
    }

    #[test]
    fn call_count_formula_exact() {
        for k in 1..=4usize {
            for h in 1..=4usize {
                let mut model = SyntheticModel {
                    q: vec![vec![0.3, 0.1, 0.7, 0.2], vec![0.5, 0.2, 0.1, 0.9]],
                    n_actions: 4,
                };
                let cfg = PlanConfig::new(h, k, 0.99, all_valid(4)).unwrap();
                let (_, diag) = beam_search_plan(&0usize, &cfg, &mut model).unwrap();
                assert_eq!(
                    diag.model_calls,
                    k * k * (h - 1) + k,
                    "K={} H={}",
                    k,
                    h
                );
                assert_eq!(diag.calls_per_depth.len(), h);
            }
        }
    }

    #[test]
    fn sequential_dependency_depth_equals_horizon() {
        // calls_per_depth has one entry per expansion wave; each wave's
        // calls depend only on the previous wave's outputs.
        let mut model = SyntheticModel {
            q: vec![vec![0.3, 0.1, 0.7]],
            n_actions: 3,
        };
        let cfg = PlanConfig::new(4, 2, 0.9, all_valid(3)).unwrap();
        let (_, diag) = beam_search_plan(&0usize, &cfg, &mut model).unwrap();
        assert_eq!(diag.calls_per_depth, vec![2, 4, 4, 4]);
    }

    #[test]
    fn degenerate_h0_and_k1_match_greedy() {
        let mut rng = Rng64::new(7);
        let mdp = random_mdp(&mut rng, 40, 4, 1.0, false);
        let q = value_iteration(&mdp, 0.9, 1e-10).unwrap();
        for s in 0..mdp.n_states {
            let greedy = greedy_from_row(&q[s]);
            let mut model = TabularModel {
                adapter: ExactModelAdapter::exact(&mdp, &q, 1),
            };
            let cfg0 = PlanConfig::new(0, 2, 0.9, all_valid(4)).unwrap();
            let (a0, d0) = beam_search_plan(&s, &cfg0, &mut model).unwrap();
            assert_eq!(a0, greedy);
            assert_eq!(d0.model_calls, 0);
            let cfg1 = PlanConfig::new(3, 1, 0.9, all_valid(4)).unwrap();
            let (a1, d1) = beam_search_plan(&s, &cfg1, &mut model).unwrap();
            assert_eq!(a1, greedy);
            assert_eq!(d1.model_calls, 3);
        }
    }

    #[test]
    fn full_width_beam_equals_exhaustive_oracle_and_value_iteration() {
        let mut rng = Rng64::new(9);
        for trial in 0..10 {
            let mdp = random_mdp(&mut rng, 8, 3, 1.0, false);
            let q = value_iteration(&mdp, 0.9, 1e-12).unwrap();
            for h in 1..=4usize {
                for s in 0..mdp.n_states {
                    let mut model = TabularModel {
                        adapter: ExactModelAdapter::exact(&mdp, &q, 1),
                    };
                    let cfg = PlanConfig::new(h, 3, 0.9, all_valid(3)).unwrap();
                    let (beam_a, _) = beam_search_plan(&s, &cfg, &mut model).unwrap();
                    let (oracle_a, _) = exhaustive_plan_oracle(&mdp, &q, s, h, 0.9).unwrap();
                    assert_eq!(beam_a, oracle_a, "trial {} s {} h {}", trial, s, h);
                    assert_eq!(beam_a, greedy_from_row(&q[s]));
                }
            }
        }
    }

    #[test]
    fn beam_is_deterministic_across_runs() {
        let mut rng = Rng64::new(21);
        let mdp = random_mdp(&mut rng, 12, 4, 1.0, true);
        let q = value_iteration(&mdp, 0.95, 1e-10).unwrap();
        let run = || {
            let mut model = TabularModel {
                adapter: ExactModelAdapter::exact(&mdp, &q, 5),
            };
            let cfg = PlanConfig::new(3, 2, 0.95, all_valid(4)).unwrap();
            (0..mdp.n_states)
                .map(|s| beam_search_plan(&s, &cfg, &mut model).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mcts_one_iteration_picks_highest_prior() {
        let mut model = SyntheticModel {
            q: vec![vec![0.1, 0.9, 0.3]],
            n_actions: 3,
        };
        let cfg = MctsConfig {
            iterations: 1,
            temperature: 0.5,
            max_depth: 3,
            gamma: 0.99,
            c_puct: 1.25,
            valid: all_valid(3),
        };
        assert_eq!(mcts_plan(&0usize, &cfg, &mut model).unwrap(), 1);
    }

    #[test]
    fn priors_become_uniform_at_high_temperature() {
        let q = vec![5.0, -3.0, 0.5, 2.0];
        let priors = softmax_priors(&q, &all_valid(4), 1e9);
        for (_, p) in priors {
            assert!((p - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn mcts_finds_optimal_actions_on_chain() {
        // 5-state chain: action 0 advances (terminal reward at the end),
        // action 1 retreats.
        let mut mdp = TabularMdp::deterministic(6, 2, |s, a| {
            if s >= 5 {
                (5, 0.0, true)
            } else if a == 0 {
                let ns = s + 1;
                (ns, if ns == 5 { 1.0 } else { 0.0 }, ns == 5)
            } else {
                (s.saturating_sub(1), 0.0, false)
            }
        });
        mdp.terminal[5] = true;
        let q = value_iteration(&mdp, 0.99, 1e-10).unwrap();
        let cfg = MctsConfig {
            iterations: 256,
            temperature: 0.9,
            max_depth: 6,
            gamma: 0.99,
            c_puct: 1.25,
            valid: all_valid(2),
        };
        let mut matches = 0;
        for s in 0..5 {
            let mut model = TabularModel {
                adapter: ExactModelAdapter::exact(&mdp, &q, s as u64),
            };
            let a = mcts_plan(&s, &cfg, &mut model).unwrap();
            if a == greedy_from_row(&q[s]) {
                matches += 1;
            }
        }
        assert!(matches >= 5 * 95 / 100, "only {}/5 matched", matches);
    }

    #[test]
    fn bound_rhs_examples() {
        // eps_s = eps_r = 0 -> gamma^H * eps_q
        let b = bound_rhs(0.0, 0.0, 2.0, 0.9, 3).unwrap();
        assert!((b - 0.9f64.powi(3) * 2.0).abs() < 1e-12);
        // gamma=0.99, H=2, er=0.1, es=0, eq=1 -> 0.199 + 0.9801 = 1.1791
        let b = bound_rhs(0.0, 0.1, 1.0, 0.99, 2).unwrap();
        assert!((b - 1.1791).abs() < 1e-10, "{}", b);
        // H=1: middle reward term vanishes; es only multiplies gamma*eq.
        let b = bound_rhs(0.5, 0.3, 1.0, 0.9, 1).unwrap();
        assert!((b - (0.3 + 0.9 * 1.0 * 0.5 + 0.9)).abs() < 1e-12);
        assert!(bound_rhs(-0.1, 0.0, 0.0, 0.9, 1).is_err());
        assert!(bound_rhs(0.0, 0.0, 0.0, 1.0, 1).is_err());
        assert!(bound_rhs(0.0, 0.0, 0.0, 0.9, 0).is_err());
    }

    #[test]
    fn bound_condition_examples() {
        // eps_r = eps_s = 0 -> holds for any eps_q >= 0
        assert!(bound_condition_holds(0.0, 0.0, 0.0, 1.0, 1.0, 0.9, 2).unwrap());
        assert!(bound_condition_holds(0.0, 0.0, 5.0, 3.0, 1.0, 0.9, 2).unwrap());
        // eps_r = (1-gamma) * eps_q, eps_s = 0 -> boundary equality
        let gamma = 0.9;
        let eps_q = 2.0;
        let eps_r = (1.0 - gamma) * eps_q;
        assert!(bound_condition_holds(0.0, eps_r, eps_q, 1.0, 1.0, gamma, 3).unwrap());
        assert!(!bound_condition_holds(0.0, eps_r * 1.01, eps_q, 1.0, 1.0, gamma, 3).unwrap());
    }

    #[test]
    fn condition_agrees_with_rearranged_inequality() {
        let mut rng = Rng64::new(33);
        for _ in 0..10_000 {
            let gamma = rng.range(0.05, 0.99);
            let h = 1 + rng.below(6);
            let eps_s = rng.range(0.0, 1.0);
            let eps_r = rng.range(0.0, 1.0);
            let eps_q = rng.range(0.0, 2.0);
            let l_r = rng.range(0.0, 2.0);
            let l_q = rng.range(0.0, 2.0);
            let got = bound_condition_holds(eps_s, eps_r, eps_q, l_r, l_q, gamma, h).unwrap();
            // Oracle: the Lipschitz-form bound restated as rhs <= eps_q.
            let gh = gamma.powi(h as i32);
            let rhs = (1.0 - gh) / (1.0 - gamma) * eps_r
                + ((gamma - gh) / (1.0 - gamma) * l_r + gh * l_q) * eps_s
                + gh * eps_q;
            let want = rhs <= eps_q + 1e-12;
            assert_eq!(got, want, "g={} h={}", gamma, h);
        }
    }

    #[test]
    fn bound_trials_have_zero_violations() {
        let trials = run_bound_trials(100, 17).unwrap();
        assert_eq!(trials.len(), 100);
        for t in &trials {
            assert!(
                t.holds,
                "trial {}: gap {} > bound {}",
                t.trial, t.measured_gap, t.bound
            );
        }
    }
}
