//! Desk-scale multi-task grid environments with enumerable state spaces,
//! pixel-like observations, and exact oracles (value iteration, exhaustive
//! tree search, an exact world-model adapter).
//!
//! All tasks share one observation encoding (8x8 grayscale) and one global
//! action space; per-task valid-action masks differ. Environments are value
//! semantic: `env_step` consumes a state and returns the next one.

pub mod mdp;

use crate::error::{Result, WamError};
use crate::rng::Rng64;
use serde::{Deserialize, Serialize};

/// Global action space shared by every task.
pub const A_MAX: usize = 5;
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const STAY: usize = 4;

pub const GRID: usize = 5;
pub const OBS_H: usize = 8;
pub const OBS_W: usize = 8;

// Pixel intensities used by the renderer.
const PX_AGENT: f64 = 1.0;
const PX_PELLET: f64 = 0.55;
const PX_HAZARD: f64 = 0.75;
const PX_KEY: f64 = 0.4;
const PX_DOOR: f64 = 0.6;
const PX_GOAL: f64 = 0.85;
const PX_TRAP: f64 = 0.3;
const PX_FLAG: f64 = 0.9;

/// Task identity. The first three are the training suite; `GridSeekIce` is
/// held out for fine-tuning and has distinct (sliding) dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    GridCollect,
    GridDodge,
    KeyDoor,
    GridSeekIce,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::GridCollect,
        Task::GridDodge,
        Task::KeyDoor,
        Task::GridSeekIce,
    ];

    pub const TRAIN: [Task; 3] = [Task::GridCollect, Task::GridDodge, Task::KeyDoor];
    pub const HOLDOUT: Task = Task::GridSeekIce;

    pub fn id(self) -> usize {
        match self {
            Task::GridCollect => 0,
            Task::GridDodge => 1,
            Task::KeyDoor => 2,
            Task::GridSeekIce => 3,
        }
    }

    pub fn from_id(id: usize) -> Result<Task> {
        Task::ALL
            .get(id)
            .copied()
            .ok_or_else(|| WamError::contract(format!("unknown task id {}", id)))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::GridCollect => "grid-collect",
            Task::GridDodge => "grid-dodge",
            Task::KeyDoor => "key-door",
            Task::GridSeekIce => "grid-seek-ice",
        }
    }

    pub fn from_name(name: &str) -> Result<Task> {
        Task::ALL
            .iter()
            .copied()
            .find(|t| t.name() == name)
            .ok_or_else(|| WamError::config(format!("unknown task '{}'", name)))
    }

    /// Global ids of the actions this task accepts.
    pub fn valid_actions(self) -> &'static [usize] {
        match self {
            Task::GridCollect => &[UP, DOWN, LEFT, RIGHT],
            Task::GridDodge => &[LEFT, RIGHT, STAY],
            Task::KeyDoor => &[UP, DOWN, LEFT, RIGHT],
            Task::GridSeekIce => &[UP, DOWN, LEFT, RIGHT],
        }
    }

    pub fn valid_mask(self) -> [bool; A_MAX] {
        let mut m = [false; A_MAX];
        for &a in self.valid_actions() {
            m[a] = true;
        }
        m
    }
}

/// Per-task environment parameters plus measured reference scores used for
/// score normalization. Reference scores are filled by measurement, never
/// asserted.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EnvSpec {
    pub task: Task,
    pub grid: usize,
    pub valid_action_count: usize,
    /// Reward emitted per scoring event; GridDodge uses a non-unit value so
    /// sign ternarization loses information.
    pub reward_unit: f64,
    /// Probability that a uniformly random valid action replaces the chosen
    /// one (dynamics stochasticity knob).
    pub eps_dyn: f64,
    pub max_steps: u32,
    pub ref_random: Option<f64>,
    pub ref_oracle: Option<f64>,
}

impl EnvSpec {
    pub fn new(task: Task) -> EnvSpec {
        EnvSpec {
            task,
            grid: GRID,
            valid_action_count: task.valid_actions().len(),
            reward_unit: match task {
                Task::GridDodge => 0.5,
                _ => 1.0,
            },
            eps_dyn: 0.0,
            max_steps: 30,
            ref_random: None,
            ref_oracle: None,
        }
    }

    pub fn with_eps_dyn(mut self, eps: f64) -> Self {
        self.eps_dyn = eps;
        self
    }
}

/// Full internal environment state. Interpretation of `aux_*` depends on the
/// task: pellet bitmask for GridCollect, hazard position for GridDodge,
/// has-key flag for KeyDoor, unused for GridSeekIce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub agent_r: u8,
    pub agent_c: u8,
    pub aux_a: u8,
    pub aux_b: u8,
    pub steps: u32,
}

impl EnvState {
    fn core(self) -> (u8, u8, u8, u8) {
        (self.agent_r, self.agent_c, self.aux_a, self.aux_b)
    }
}

pub fn initial_state(spec: &EnvSpec) -> EnvState {
    match spec.task {
        Task::GridCollect => EnvState {
            agent_r: 2,
            agent_c: 2,
            aux_a: 0b111, // three pellets alive
            aux_b: 0,
            steps: 0,
        },
        Task::GridDodge => EnvState {
            agent_r: 4,
            agent_c: 2,
            aux_a: 0, // hazard row
            aux_b: 0, // hazard col
            steps: 0,
        },
        Task::KeyDoor => EnvState {
            agent_r: 0,
            agent_c: 0,
            aux_a: 0, // has key
            aux_b: 0,
            steps: 0,
        },
        Task::GridSeekIce => EnvState {
            agent_r: 0,
            agent_c: 0,
            aux_a: 0,
            aux_b: 0,
            steps: 0,
        },
    }
}

const PELLETS: [(u8, u8); 3] = [(0, 0), (0, 4), (4, 2)];
const KEY_POS: (u8, u8) = (4, 0);
const DOOR_POS: (u8, u8) = (2, 4);
const GOAL_POS: (u8, u8) = (4, 4);
const TRAP_POS: (u8, u8) = (2, 2);

fn moved(r: u8, c: u8, action: usize) -> (u8, u8) {
    let (mut r, mut c) = (r as i8, c as i8);
    match action {
        UP => r -= 1,
        DOWN => r += 1,
        LEFT => c -= 1,
        RIGHT => c += 1,
        STAY => {}
        _ => unreachable!("action id out of range"),
    }
    let hi = (GRID - 1) as i8;
    (r.clamp(0, hi) as u8, c.clamp(0, hi) as u8)
}

/// Core Markov transition, ignoring the step counter and truncation. Used
/// both by `env_step` and by the enumerable MDP view.
pub(crate) fn transition_core(
    spec: &EnvSpec,
    s: (u8, u8, u8, u8),
    action: usize,
) -> ((u8, u8, u8, u8), f64, bool) {
    let (ar, ac, aux_a, aux_b) = s;
    match spec.task {
        Task::GridCollect => {
            let (nr, nc) = moved(ar, ac, action);
            let mut mask = aux_a;
            let mut reward = 0.0;
            for (i, &(pr, pc)) in PELLETS.iter().enumerate() {
                if mask & (1 << i) != 0 && (nr, nc) == (pr, pc) {
                    mask &= !(1 << i);
                    reward += spec.reward_unit;
                }
            }
            let done = mask == 0;
            ((nr, nc, mask, 0), reward, done)
        }
        Task::GridDodge => {
            let (_, nc) = moved(ar, ac, action);
            let (hr, hc) = (aux_a, aux_b);
            let nhr = hr + 1;
            if nhr == (GRID - 1) as u8 {
                // Hazard reaches the agent's row.
                if hc == nc {
                    ((4, nc, nhr, hc), -1.0, true)
                } else {
                    // Dodged; hazard respawns deterministically.
                    let respawn = (hc + 3) % GRID as u8;
                    ((4, nc, 0, respawn), spec.reward_unit, false)
                }
            } else {
                ((4, nc, nhr, hc), 0.0, false)
            }
        }
        Task::KeyDoor => {
            let (nr, nc) = moved(ar, ac, action);
            let mut haskey = aux_a;
            if (nr, nc) == KEY_POS {
                haskey = 1;
            }
            if haskey == 1 && (nr, nc) == DOOR_POS {
                ((nr, nc, haskey, 0), spec.reward_unit, true)
            } else {
                ((nr, nc, haskey, 0), 0.0, false)
            }
        }
        Task::GridSeekIce => {
            // Sliding dynamics: each action moves up to two cells, stopping
            // early at walls or when crossing the trap or the goal.
            let (mut r, mut c) = (ar, ac);
            for _ in 0..2 {
                let (nr, nc) = moved(r, c, action);
                if (nr, nc) == (r, c) {
                    break; // wall
                }
                r = nr;
                c = nc;
                if (r, c) == GOAL_POS || (r, c) == TRAP_POS {
                    break;
                }
            }
            if (r, c) == GOAL_POS {
                ((r, c, 0, 0), spec.reward_unit, true)
            } else if (r, c) == TRAP_POS {
                ((r, c, 0, 0), -1.0, true)
            } else {
                ((r, c, 0, 0), 0.0, false)
            }
        }
    }
}

/// One environment step. With probability `eps_dyn` a uniformly random valid
/// action substitutes the chosen one. Episodes truncate (done = true) when
/// the step counter reaches `max_steps`.
pub fn env_step(
    spec: &EnvSpec,
    state: &EnvState,
    action: usize,
    rng: &mut Rng64,
) -> Result<(EnvState, f64, bool)> {
    if !spec.task.valid_mask().get(action).copied().unwrap_or(false) {
        return Err(WamError::contract(format!(
            "action {} invalid for task {}",
            action,
            spec.task.name()
        )));
    }
    let actual = if spec.eps_dyn > 0.0 && rng.chance(spec.eps_dyn) {
        *rng.choose(spec.task.valid_actions())
    } else {
        action
    };
    let (core, reward, term) = transition_core(spec, state.core(), actual);
    let steps = state.steps + 1;
    let done = term || steps >= spec.max_steps;
    Ok((
        EnvState {
            agent_r: core.0,
            agent_c: core.1,
            aux_a: core.2,
            aux_b: core.3,
            steps,
        },
        reward,
        done,
    ))
}

/// Deterministic 8x8 grayscale rendering. Distinct semantic states of a task
/// render distinctly; the agent is drawn last and occludes cell content.
pub fn render_observation(spec: &EnvSpec, state: &EnvState) -> Vec<f64> {
    fn put(img: &mut [f64], r: u8, c: u8, v: f64) {
        img[(r as usize + 1) * OBS_W + (c as usize + 1)] = v;
    }
    let mut img = vec![0.0; OBS_H * OBS_W];
    match spec.task {
        Task::GridCollect => {
            for (i, &(pr, pc)) in PELLETS.iter().enumerate() {
                if state.aux_a & (1 << i) != 0 {
                    put(&mut img, pr, pc, PX_PELLET);
                }
            }
        }
        Task::GridDodge => {
            put(&mut img, state.aux_a, state.aux_b, PX_HAZARD);
        }
        Task::KeyDoor => {
            if state.aux_a == 0 {
                put(&mut img, KEY_POS.0, KEY_POS.1, PX_KEY);
            }
            put(&mut img, DOOR_POS.0, DOOR_POS.1, PX_DOOR);
            if state.aux_a == 1 {
                img[OBS_H * OBS_W - 1] = PX_FLAG;
            }
        }
        Task::GridSeekIce => {
            put(&mut img, GOAL_POS.0, GOAL_POS.1, PX_GOAL);
            put(&mut img, TRAP_POS.0, TRAP_POS.1, PX_TRAP);
        }
    }
    put(&mut img, state.agent_r, state.agent_c, PX_AGENT);
    img
}

/// Enumerate all core states reachable from the initial state, in a stable
/// BFS order with the initial state first.
pub fn enumerate_states(spec: &EnvSpec) -> Vec<(u8, u8, u8, u8)> {
    let mut seen = std::collections::HashSet::new();
    let mut order = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    let s0 = initial_state(spec).core();
    seen.insert(s0);
    order.push(s0);
    queue.push_back(s0);
    while let Some(s) = queue.pop_front() {
        for &a in spec.task.valid_actions() {
            let (ns, _, term) = transition_core(spec, s, a);
            if !term && seen.insert(ns) {
                order.push(ns);
                queue.push_back(ns);
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_step_when_eps_dyn_zero() {
        for task in Task::ALL {
            let spec = EnvSpec::new(task);
            let s = initial_state(&spec);
            let a = spec.task.valid_actions()[0];
            let mut r1 = Rng64::new(1);
            let mut r2 = Rng64::new(2);
            let out1 = env_step(&spec, &s, a, &mut r1).unwrap();
            let out2 = env_step(&spec, &s, a, &mut r2).unwrap();
            assert_eq!(out1, out2);
        }
    }

    #[test]
    fn invalid_action_rejected() {
        let spec = EnvSpec::new(Task::GridDodge);
        let s = initial_state(&spec);
        let mut rng = Rng64::new(0);
        assert!(env_step(&spec, &s, UP, &mut rng).is_err());
    }

    #[test]
    fn truncation_at_max_steps() {
        let spec = EnvSpec::new(Task::KeyDoor);
        let mut s = initial_state(&spec);
        let mut rng = Rng64::new(0);
        let mut done = false;
        for i in 0..spec.max_steps {
            let (ns, _, d) = env_step(&spec, &s, STAY.min(3), &mut rng).unwrap();
            s = ns;
            done = d;
            if d {
                assert_eq!(i + 1, spec.max_steps);
            }
        }
        assert!(done);
    }

    #[test]
    fn render_is_pure_and_in_range() {
        for task in Task::ALL {
            let spec = EnvSpec::new(task);
            let s = initial_state(&spec);
            let a = render_observation(&spec, &s);
            let b = render_observation(&spec, &s);
            assert_eq!(a, b);
            assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn render_distinguishes_positions() {
        let spec = EnvSpec::new(Task::GridCollect);
        let mut s1 = initial_state(&spec);
        s1.agent_r = 0;
        s1.agent_c = 0;
        // pellet mask without the (0,0) pellet so the agent does not overlap
        s1.aux_a = 0b110;
        let mut s2 = s1;
        s2.agent_c = 1;
        assert_ne!(
            render_observation(&spec, &s1),
            render_observation(&spec, &s2)
        );
    }

    #[test]
    fn all_task_states_render_injectively() {
        for task in Task::ALL {
            let spec = EnvSpec::new(task);
            let states = enumerate_states(&spec);
            let mut seen = std::collections::HashMap::new();
            for s in states {
                let st = EnvState {
                    agent_r: s.0,
                    agent_c: s.1,
                    aux_a: s.2,
                    aux_b: s.3,
                    steps: 0,
                };
                let img: Vec<u64> = render_observation(&spec, &st)
                    .iter()
                    .map(|v| v.to_bits())
                    .collect();
                if let Some(prev) = seen.insert(img, s) {
                    panic!("tasks {:?}: states {:?} and {:?} render equal", task, prev, s);
                }
            }
        }
    }

    #[test]
    fn eps_dyn_transition_frequencies_match_kernel() {
        // Agent at center of GridCollect; eps_dyn = 0.4. Moving UP should
        // occur with prob 1 - eps + eps/4; the three others eps/4 each.
        let spec = EnvSpec::new(Task::GridCollect).with_eps_dyn(0.4);
        let s = initial_state(&spec);
        let mut rng = Rng64::new(7);
        let n = 10_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            let (ns, _, _) = env_step(&spec, &s, UP, &mut rng).unwrap();
            *counts.entry((ns.agent_r, ns.agent_c)).or_insert(0usize) += 1;
        }
        let p_main = 1.0 - spec.eps_dyn + spec.eps_dyn / 4.0;
        let p_side = spec.eps_dyn / 4.0;
        let expect = |p: f64| (n as f64 * p, (n as f64 * p * (1.0 - p)).sqrt());
        let (mu, sd) = expect(p_main);
        let main = counts.get(&(1, 2)).copied().unwrap_or(0) as f64;
        assert!((main - mu).abs() < 3.0 * sd, "main: {} vs {}", main, mu);
        for target in [(3u8, 2u8), (2, 1), (2, 3)] {
            let (mu, sd) = expect(p_side);
            let c = counts.get(&target).copied().unwrap_or(0) as f64;
            assert!((c - mu).abs() < 3.0 * sd, "side {:?}: {} vs {}", target, c, mu);
        }
    }

    #[test]
    fn state_spaces_are_small() {
        for task in Task::ALL {
            let spec = EnvSpec::new(task);
            let n = enumerate_states(&spec).len();
            assert!(n <= 100_000, "{:?} has {} states", task, n);
        }
    }
}
