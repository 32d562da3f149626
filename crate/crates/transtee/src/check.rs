//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, VarId};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Max over all parameter components of
/// `|analytic - central_difference| / max(1, |central_difference|)`.
///
/// `build` must construct the same deterministic scalar for the same
/// parameter values; it receives one var per parameter, in `ParamSet`
/// order. Returns `f64::INFINITY` if anything goes non-finite.
pub fn finite_diff_check<S, F>(build: F, params: &mut ParamSet<S>, step: f64) -> f64
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[VarId]) -> Result<VarId>,
{
    let eval = |params: &ParamSet<S>| -> f64 {
        let mut g = Graph::new();
        let vars = params.register(&mut g, false);
        match build(&mut g, &vars) {
            Ok(root) => g.value(root).scalar_value().to_f64_lossy(),
            Err(_) => f64::INFINITY,
        }
    };

    // analytic pass
    let mut g = Graph::new();
    let vars = params.register(&mut g, true);
    let root = match build(&mut g, &vars) {
        Ok(r) => r,
        Err(_) => return f64::INFINITY,
    };
    let grads = match g.backward(root) {
        Ok(gr) => gr,
        Err(_) => return f64::INFINITY,
    };
    let analytic = params.collect_grads(&grads, &vars);

    let mut max_err: f64 = 0.0;
    let h = S::from_f64(step);
    for pi in 0..params.len() {
        for ci in 0..analytic[pi].len() {
            let orig = params.get(crate::params::ParamRef(pi)).data()[ci];
            params.get_mut(crate::params::ParamRef(pi)).data_mut()[ci] = orig + h;
            let fp = eval(params);
            params.get_mut(crate::params::ParamRef(pi)).data_mut()[ci] = orig - h;
            let fm = eval(params);
            params.get_mut(crate::params::ParamRef(pi)).data_mut()[ci] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let an = analytic[pi].data()[ci].to_f64_lossy();
            if !fd.is_finite() || !an.is_finite() {
                return f64::INFINITY;
            }
            let err = (an - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_near_exact() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.add("x", Tensor::vector(vec![1.5, -0.3, 2.0]));
        let err = finite_diff_check(
            |g, vars| {
                let sq = g.square(vars[0]);
                Ok(g.sum_all(sq))
            },
            &mut params,
            1e-4,
        );
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn linear_is_near_exact() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.add("x", Tensor::vector(vec![0.7, -1.1]));
        let err = finite_diff_check(
            |g, vars| {
                let s = g.scale(vars[0], 3.0);
                Ok(g.sum_all(s))
            },
            &mut params,
            1e-4,
        );
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let mut rng = RngStream::new(17);
        let mut params: ParamSet<f64> = ParamSet::new();
        params.add_affine("a", &[5, 7], 7, &mut rng);
        params.add_affine("b", &[7, 3], 7, &mut rng);
        let err = finite_diff_check(
            |g, vars| {
                let c = g.matmul(vars[0], vars[1])?;
                Ok(g.sum_all(c))
            },
            &mut params,
            1e-5,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn softmax_jacobian_matches_fd() {
        let mut rng = RngStream::new(23);
        let mut params: ParamSet<f64> = ParamSet::new();
        let data: Vec<f64> = (0..24).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        params.add("x", Tensor::new(vec![4, 6], data).unwrap());
        // weight the outputs so every Jacobian entry participates
        let wdata: Vec<f64> = (0..24).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let w = Tensor::new(vec![4, 6], wdata).unwrap();
        let err = finite_diff_check(
            |g, vars| {
                let s = g.softmax_last(vars[0])?;
                let wc = g.constant(w.clone());
                let p = g.mul(s, wc)?;
                Ok(g.sum_all(p))
            },
            &mut params,
            1e-6,
        );
        assert!(err < 1e-6, "err {err}");
    }
}
