//! Central finite-difference oracle for gradient verification. Test-support
//! code: it evaluates losses as black-box functions of the parameters and is
//! deliberately independent of the tape's backward pass.

use super::{GradMap, ParamSet};
use crate::rng::Rng64;

pub const FD_STEP: f64 = 1e-5;

/// Scaled error between an analytic and a finite-difference derivative.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference of `f` w.r.t. one parameter component.
pub fn central_diff<F>(params: &mut ParamSet, pid: usize, index: usize, step: f64, mut f: F) -> f64
where
    F: FnMut(&ParamSet) -> f64,
{
    let orig = params.get(pid).values()[index];
    params.get_mut(pid).values_mut()[index] = orig + step;
    let hi = f(params);
    params.get_mut(pid).values_mut()[index] = orig - step;
    let lo = f(params);
    params.get_mut(pid).values_mut()[index] = orig;
    (hi - lo) / (2.0 * step)
}

/// Probe `n_probes` randomly chosen parameter components and return the
/// maximum relative error between the analytic gradient and the central
/// finite difference.
pub fn max_rel_error_fd<F>(
    params: &mut ParamSet,
    grads: &GradMap,
    n_probes: usize,
    rng: &mut Rng64,
    mut f: F,
) -> f64
where
    F: FnMut(&ParamSet) -> f64,
{
    let pids: Vec<usize> = grads.iter().map(|(pid, _)| pid).collect();
    assert!(!pids.is_empty(), "no parameters to probe");
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let pid = *rng.choose(&pids);
        let g = grads.get(pid).unwrap();
        let index = rng.below(g.len());
        let analytic = g[index];
        let fd = central_diff(params, pid, index, FD_STEP, &mut f);
        worst = worst.max(relative_error(analytic, fd));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::numerics::Tensor;

    #[test]
    fn fd_matches_analytic_on_composite_expression() {
        let mut rng = Rng64::new(42);
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::randn(vec![3, 4], 0.7, &mut rng), true);
        ps.add("b", Tensor::randn(vec![4], 0.7, &mut rng), false);

        let x_data: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) * 0.3).collect();
        let loss = |ps: &ParamSet| {
            let mut t = Tape::new();
            let w = t.param(ps, 0);
            let b = t.param(ps, 1);
            let x = t.leaf(vec![2, 3], x_data.clone());
            let h = t.matmul(x, w);
            let h = t.add_bias(h, b);
            let a = t.mish(h);
            let ls = t.log_softmax_rows(a);
            let picked = t.gather_row_elems(ls, &[1, 3]);
            let neg = t.scale(picked, -1.0);
            let m = t.mean(neg);
            t.scalar_value(m)
        };

        let mut t = Tape::new();
        let w = t.param(&ps, 0);
        let b = t.param(&ps, 1);
        let x = t.leaf(vec![2, 3], x_data.clone());
        let h = t.matmul(x, w);
        let h = t.add_bias(h, b);
        let a = t.mish(h);
        let ls = t.log_softmax_rows(a);
        let picked = t.gather_row_elems(ls, &[1, 3]);
        let neg = t.scale(picked, -1.0);
        let m = t.mean(neg);
        let grads = t.backward(m).unwrap();

        let worst = max_rel_error_fd(&mut ps, &grads, 40, &mut rng, loss);
        assert!(worst < 1e-3, "max rel err {}", worst);
    }
}
