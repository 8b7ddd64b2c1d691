//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use super::{GradMap, ParamSet};
use crate::error::{Result, WamError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Moment estimates and hyperparameters for AdamW. With `weight_decay = 0`
/// this is plain Adam (used for the tokenizer).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<usize, Vec<f64>>,
    v: BTreeMap<usize, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Forget all moment estimates but keep hyperparameters.
    pub fn reset_moments(&mut self) {
        self.m.clear();
        self.v.clear();
        self.step = 0;
    }
}

/// One AdamW step over every parameter present in `grads`. Parameters with
/// no entry in the map are left untouched (their module was not part of the
/// step's graph). Weight decay is decoupled and applied only to parameters
/// whose `decay` flag is set.
pub fn adamw_update(
    params: &mut ParamSet,
    grads: &GradMap,
    state: &mut OptimizerState,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (pid, g) in grads.iter() {
        if pid >= params.len() {
            return Err(WamError::contract(format!(
                "gradient for unknown parameter id {}",
                pid
            )));
        }
        let decay = params.decays(pid);
        let p = params.get_mut(pid);
        if p.len() != g.len() {
            return Err(WamError::contract(format!(
                "gradient shape mismatch for param {}: {} vs {}",
                pid,
                g.len(),
                p.len()
            )));
        }
        let m = state.m.entry(pid).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(pid).or_insert_with(|| vec![0.0; g.len()]);
        let values = p.values_mut();
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            if decay {
                values[i] -= state.lr * state.weight_decay * values[i];
            }
            values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(WamError::contract("max_norm must be positive"));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn one_param(v: f64, decay: bool) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::scalar(v), decay);
        ps
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut ps = one_param(1.5, true);
        let mut st = OptimizerState::new(0.1, 0.0);
        let mut g = GradMap::new();
        g.insert(0, vec![0.0]);
        adamw_update(&mut ps, &g, &mut st).unwrap();
        assert_eq!(ps.get(0).values()[0], 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_bias_corrected_update() {
        // param 1.0, grad 1.0, lr 0.1, wd 0: m_hat = v_hat = 1 -> delta = lr/(1+eps)
        let mut ps = one_param(1.0, true);
        let mut st = OptimizerState::new(0.1, 0.0);
        let mut g = GradMap::new();
        g.insert(0, vec![1.0]);
        adamw_update(&mut ps, &g, &mut st).unwrap();
        assert!((ps.get(0).values()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_only() {
        // wd 0.01, grad 0, lr 0.1, param 1.0 -> 1.0 - 0.1*0.01*1.0 = 0.999
        let mut ps = one_param(1.0, true);
        let mut st = OptimizerState::new(0.1, 0.01);
        let mut g = GradMap::new();
        g.insert(0, vec![0.0]);
        adamw_update(&mut ps, &g, &mut st).unwrap();
        assert!((ps.get(0).values()[0] - 0.999).abs() < 1e-12);
    }

    #[test]
    fn non_decay_params_skip_weight_decay() {
        let mut ps = one_param(1.0, false);
        let mut st = OptimizerState::new(0.1, 0.01);
        let mut g = GradMap::new();
        g.insert(0, vec![0.0]);
        adamw_update(&mut ps, &g, &mut st).unwrap();
        assert_eq!(ps.get(0).values()[0], 1.0);
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let mut ps = one_param(1.0, true);
        let mut st = OptimizerState::new(0.1, 0.0);
        let mut g = GradMap::new();
        g.insert(0, vec![1.0, 2.0]);
        assert!(adamw_update(&mut ps, &g, &mut st).is_err());
    }

    #[test]
    fn clip_below_threshold_unchanged() {
        let mut g = GradMap::new();
        g.insert(0, vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut g, 10.0).unwrap();
        assert_eq!(norm, 5.0);
        assert_eq!(g.get(0).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = GradMap::new();
        g.insert(0, vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        let got = g.get(0).unwrap();
        assert!((got[0] - 0.6).abs() < 1e-12);
        assert!((got[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_zero_grads_noop() {
        let mut g = GradMap::new();
        g.insert(0, vec![0.0, 0.0]);
        let norm = clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(norm, 0.0);
        assert_eq!(g.get(0).unwrap(), &[0.0, 0.0]);
    }
}
