//! Central finite differences over the trainable tensors of a parameter set.
//! This is the reference every hand-rolled backward pass is judged against:
//! the numeric side only ever calls a loss evaluation, never a tape.

use super::mlp::{ParamGrads, ParamSet};
use crate::error::Result;

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-3;
pub const DEFAULT_ABS_FLOOR: f64 = 1e-6;

/// Central differences (f(p+h) - f(p-h)) / 2h for every trainable scalar.
/// `f` must be a pure function of the passed parameters; `params` is restored
/// to its original values before returning.
pub fn central_diff_grads<F>(params: &mut ParamSet, h: f64, mut f: F) -> Result<ParamGrads>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut numeric = ParamGrads::zeros_like(params);
    for t in 0..params.trainable_len() {
        let len = params.trainable_at(t).data().len();
        for k in 0..len {
            let old = params.trainable_at(t).data()[k];
            params.trainable_at_mut(t).data_mut()[k] = old + h;
            let f_plus = f(params)?;
            params.trainable_at_mut(t).data_mut()[k] = old - h;
            let f_minus = f(params)?;
            params.trainable_at_mut(t).data_mut()[k] = old;
            numeric.tensor_at_mut(t).data_mut()[k] = (f_plus - f_minus) / (2.0 * h);
        }
    }
    Ok(numeric)
}

/// Result of comparing analytic against numeric gradients elementwise.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: usize,
    /// Flat description of the worst element, for diagnostics.
    pub worst: String,
}

impl GradComparison {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// An element passes when |a - n| <= abs_floor or the error relative to
/// max(|a|, |n|) is within rel_tol.
pub fn compare_grads(
    analytic: &ParamGrads,
    numeric: &ParamGrads,
    rel_tol: f64,
    abs_floor: f64,
) -> GradComparison {
    let at = analytic.tensors();
    let nt = numeric.tensors();
    assert_eq!(at.len(), nt.len(), "gradient tensor count mismatch");
    let mut checked = 0;
    let mut failures = 0;
    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    for (ti, (a, n)) in at.iter().zip(&nt).enumerate() {
        assert_eq!(a.shape(), n.shape(), "gradient tensor shape mismatch");
        for (k, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            checked += 1;
            let diff = (av - nv).abs();
            let denom = av.abs().max(nv.abs());
            let rel = if denom > 0.0 { diff / denom } else { 0.0 };
            let ok = diff <= abs_floor || rel <= rel_tol;
            if !ok {
                failures += 1;
            }
            if rel > max_rel && diff > abs_floor {
                max_rel = rel;
                worst = format!("tensor {ti} element {k}: analytic {av} vs numeric {nv}");
            }
        }
    }
    GradComparison { checked, max_rel_err: max_rel, failures, worst }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::matrix::Matrix;
    use crate::diffcore::mlp::{Activation, Mlp, MlpSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Backward of a batch-norm + leaky-relu net against finite differences,
    /// with loss = sum of squared outputs.
    #[test]
    fn backward_matches_central_differences_on_bn_net() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::LeakyRelu(0.01))
            .with_batch_norm_hidden();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::init(spec.clone(), &mut rng).unwrap();
        let x = {
            let mut m = Matrix::zeros(5, 3);
            for v in m.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            m
        };

        let loss_of = |params: &ParamSet| -> Result<f64> {
            let mut net = Mlp::from_parts(spec.clone(), params.clone())?;
            let (out, _) = net.forward_train(&x)?;
            Ok(out.data().iter().map(|v| v * v).sum())
        };

        let mut work = mlp.clone();
        let (out, tape) = work.forward_train(&x).unwrap();
        let upstream = out.scale(2.0);
        let (analytic, _) = work.backward(&tape, &upstream).unwrap();

        let mut params = mlp.params.clone();
        let numeric = central_diff_grads(&mut params, DEFAULT_FD_STEP, loss_of).unwrap();
        let cmp = compare_grads(&analytic, &numeric, DEFAULT_REL_TOL, DEFAULT_ABS_FLOOR);
        assert!(cmp.passed(), "{}", cmp.worst);
        assert_eq!(params, mlp.params, "params must be restored after the sweep");
    }

    #[test]
    fn compare_grads_flags_a_broken_gradient() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Linear);
        let params = crate::diffcore::mlp::ParamSet::init(
            &spec,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let mut a = ParamGrads::zeros_like(&params);
        let b = ParamGrads::zeros_like(&params);
        a.layers[0].weight.set(0, 0, 1.0);
        let cmp = compare_grads(&a, &b, 1e-3, 1e-6);
        assert!(!cmp.passed());
        assert_eq!(cmp.failures, 1);
    }
}
