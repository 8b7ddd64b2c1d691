//! Python bindings for the world-action model crate: the distributional-RL
//! primitives, the planner bound calculators, score aggregation, the desk
//! environments with their exact oracles, and offline dataset generation.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use wam_core::dataset::{generate_offline_dataset, save_dataset};
use wam_core::envs::mdp::{env_to_mdp, exhaustive_plan_oracle, value_iteration, ExactModelAdapter};
use wam_core::envs::{env_step, initial_state, render_observation, EnvSpec, EnvState, Task};
use wam_core::error::WamError;
use wam_core::planner::{
    beam_search_plan, bound_condition_holds as bound_cond, bound_rhs as bound_rhs_core,
    run_bound_trials, PlanConfig, WorldModel,
};
use wam_core::rng::Rng64;

fn py_err(e: WamError) -> PyErr {
    match e {
        WamError::Io(_) | WamError::Integrity(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyfunction]
fn atom_support(v_min: f64, v_max: f64, n: usize) -> PyResult<Vec<f64>> {
    wam_core::losses::atom_support(v_min, v_max, n).map_err(py_err)
}

#[pyfunction]
fn project_categorical(
    probs: Vec<f64>,
    shifted: Vec<f64>,
    support: Vec<f64>,
) -> PyResult<Vec<f64>> {
    if probs.len() != shifted.len() {
        return Err(PyValueError::new_err("probs/shifted length mismatch"));
    }
    Ok(wam_core::losses::project_categorical(
        &probs, &shifted, &support,
    ))
}

#[pyfunction]
fn bound_rhs(eps_s: f64, eps_r: f64, eps_q: f64, gamma: f64, horizon: usize) -> PyResult<f64> {
    bound_rhs_core(eps_s, eps_r, eps_q, gamma, horizon).map_err(py_err)
}

#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn bound_condition_holds(
    eps_s: f64,
    eps_r: f64,
    eps_q: f64,
    l_r: f64,
    l_q: f64,
    gamma: f64,
    horizon: usize,
) -> PyResult<bool> {
    bound_cond(eps_s, eps_r, eps_q, l_r, l_q, gamma, horizon).map_err(py_err)
}

#[pyfunction]
fn iqm(scores: Vec<f64>) -> PyResult<f64> {
    wam_core::evaluation::iqm(&scores).map_err(py_err)
}

#[pyfunction]
fn normalized_score(raw: f64, random_ref: f64, oracle_ref: f64) -> PyResult<f64> {
    wam_core::evaluation::normalized_score(raw, random_ref, oracle_ref).map_err(py_err)
}

#[pyfunction]
fn ternarize_reward(r: f64) -> PyResult<i8> {
    wam_core::dataset::ternarize_reward(r).map_err(py_err)
}

#[pyfunction]
fn task_names() -> Vec<String> {
    Task::ALL.iter().map(|t| t.name().to_string()).collect()
}

/// One desk-scale grid environment.
#[pyclass]
struct DeskEnv {
    spec: EnvSpec,
    state: EnvState,
    rng: Rng64,
    done: bool,
}

#[pymethods]
impl DeskEnv {
    #[new]
    #[pyo3(signature = (task, seed = 0, eps_dyn = 0.0))]
    fn new(task: &str, seed: u64, eps_dyn: f64) -> PyResult<Self> {
        let task = Task::from_name(task).map_err(py_err)?;
        let spec = EnvSpec::new(task).with_eps_dyn(eps_dyn);
        let state = initial_state(&spec);
        Ok(DeskEnv {
            spec,
            state,
            rng: Rng64::new(seed),
            done: false,
        })
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = initial_state(&self.spec);
        self.done = false;
        render_observation(&self.spec, &self.state)
    }

    /// Returns (observation, reward, done).
    fn step(&mut self, action: usize) -> PyResult<(Vec<f64>, f64, bool)> {
        if self.done {
            return Err(PyValueError::new_err("episode finished; call reset()"));
        }
        let (next, reward, done) =
            env_step(&self.spec, &self.state, action, &mut self.rng).map_err(py_err)?;
        self.state = next;
        self.done = done;
        Ok((render_observation(&self.spec, &self.state), reward, done))
    }

    fn valid_actions(&self) -> Vec<usize> {
        self.spec.task.valid_actions().to_vec()
    }

    fn obs_shape(&self) -> (usize, usize) {
        (wam_core::envs::OBS_H, wam_core::envs::OBS_W)
    }

    fn max_steps(&self) -> u32 {
        self.spec.max_steps
    }
}

/// Optimal Q-table of a task's enumerable MDP: returns (q, n_states,
/// n_actions) with q flattened row-major over states.
#[pyfunction]
#[pyo3(signature = (task, gamma = 0.99, tol = 1e-8))]
fn value_iteration_q(task: &str, gamma: f64, tol: f64) -> PyResult<(Vec<f64>, usize, usize)> {
    let task = Task::from_name(task).map_err(py_err)?;
    let spec = EnvSpec::new(task);
    let env_mdp = env_to_mdp(&spec);
    let q = value_iteration(&env_mdp.mdp, gamma, tol).map_err(py_err)?;
    let n_states = env_mdp.mdp.n_states;
    let n_actions = env_mdp.mdp.n_actions;
    Ok((q.into_iter().flatten().collect(), n_states, n_actions))
}

struct TabularModel<'a> {
    adapter: ExactModelAdapter<'a>,
}

impl WorldModel for TabularModel<'_> {
    type State = usize;
    fn q_values(&mut self, s: &usize) -> Vec<f64> {
        self.adapter.q_table[*s].clone()
    }
    fn imagine_step(&mut self, s: &usize, action: usize) -> (usize, f64, bool) {
        self.adapter.sample_step(*s, action)
    }
}

/// Beam-search planning over the exact model from the task's initial state:
/// returns (chosen_action_global_id, model_calls, oracle_action_global_id).
#[pyfunction]
#[pyo3(signature = (task, horizon = 2, beam_width = 2, gamma = 0.99))]
fn beam_plan(
    task: &str,
    horizon: usize,
    beam_width: usize,
    gamma: f64,
) -> PyResult<(usize, usize, usize)> {
    let task = Task::from_name(task).map_err(py_err)?;
    let spec = EnvSpec::new(task);
    let env_mdp = env_to_mdp(&spec);
    let q = value_iteration(&env_mdp.mdp, gamma, 1e-8).map_err(py_err)?;
    let s0 = env_mdp
        .state_index(&initial_state(&spec))
        .expect("initial state enumerated");
    let cfg = PlanConfig::new(
        horizon,
        beam_width,
        gamma,
        vec![true; env_mdp.mdp.n_actions],
    )
    .map_err(py_err)?;
    let mut model = TabularModel {
        adapter: ExactModelAdapter::exact(&env_mdp.mdp, &q, 0),
    };
    let (a_local, diag) = beam_search_plan(&s0, &cfg, &mut model).map_err(py_err)?;
    let (oracle_local, _) =
        exhaustive_plan_oracle(&env_mdp.mdp, &q, s0, horizon, gamma).map_err(py_err)?;
    let valid = spec.task.valid_actions();
    Ok((valid[a_local], diag.model_calls, valid[oracle_local]))
}

/// Generate offline shards (same format as the CLI) into `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, n_per_task = 1000, seed = 7, task = None))]
fn generate_dataset(
    out_dir: &str,
    n_per_task: usize,
    seed: u64,
    task: Option<&str>,
) -> PyResult<u64> {
    let tasks: Vec<Task> = match task {
        Some(t) => vec![Task::from_name(t).map_err(py_err)?],
        None => Task::TRAIN.to_vec(),
    };
    let specs: Vec<EnvSpec> = tasks.into_iter().map(EnvSpec::new).collect();
    let data = generate_offline_dataset(&specs, &[1.0, 0.5, 0.1, 0.01], n_per_task, 0.99, seed)
        .map_err(py_err)?;
    let manifest = save_dataset(&data, std::path::Path::new(out_dir)).map_err(py_err)?;
    Ok(manifest.counts.iter().sum())
}

/// Run the error-bound trials; returns rows of
/// (trial, eps_s, eps_r, eps_q, measured_gap, bound_rhs, holds).
#[pyfunction]
#[pyo3(signature = (trials = 100, seed = 17))]
fn bound_trials(trials: usize, seed: u64) -> PyResult<Vec<(usize, f64, f64, f64, f64, f64, bool)>> {
    let rows = run_bound_trials(trials, seed).map_err(py_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.trial, r.eps_s, r.eps_r, r.eps_q, r.measured_gap, r.bound, r.holds))
        .collect())
}

#[pymodule]
fn wam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(atom_support, m)?)?;
    m.add_function(wrap_pyfunction!(project_categorical, m)?)?;
    m.add_function(wrap_pyfunction!(bound_rhs, m)?)?;
    m.add_function(wrap_pyfunction!(bound_condition_holds, m)?)?;
    m.add_function(wrap_pyfunction!(iqm, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_score, m)?)?;
    m.add_function(wrap_pyfunction!(ternarize_reward, m)?)?;
    m.add_function(wrap_pyfunction!(task_names, m)?)?;
    m.add_function(wrap_pyfunction!(value_iteration_q, m)?)?;
    m.add_function(wrap_pyfunction!(beam_plan, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(bound_trials, m)?)?;
    m.add_class::<DeskEnv>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bindings_expose_consistent_values() {
        assert_eq!(atom_support(0.0, 2.0, 3).unwrap(), vec![0.0, 1.0, 2.0]);
        assert_eq!(iqm(vec![1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        let (a, calls, oracle) = beam_plan("grid-collect", 2, 2, 0.99).unwrap();
        assert_eq!(calls, 2 * 2 * (2 - 1) + 2);
        assert_eq!(a, oracle);
    }
}
