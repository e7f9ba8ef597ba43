use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Floor for every logarithm taken of a probability. Keeps losses finite when
/// a softmax output underflows to zero.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn ln_clamped(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Row-wise softmax with max subtraction, so large logits cannot overflow.
/// Every output row sums to 1 and the result is invariant (to rounding) under
/// a constant shift of the logits.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    assert!(logits.cols() > 0, "softmax over zero classes");
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &l) in orow.iter_mut().zip(row) {
            *o = (l - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Summed negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, with the gradient of that sum with respect to the logits
/// (`softmax - onehot` per row). Callers divide by their own batch convention.
pub fn nll_sum_with_grad(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::dim(
            "nll_sum_with_grad",
            format!("{} targets for {} rows", targets.len(), logits.rows()),
        ));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::contract(
                "nll_sum_with_grad",
                format!("target {} out of {} classes", t, logits.cols()),
            ));
        }
        loss -= ln_clamped(probs.get(r, t));
        grad.set(r, t, grad.get(r, t) - 1.0);
    }
    Ok((loss, grad))
}

/// Gradient reversal: identity on the forward value, `-lambda * grad` on the
/// way back. Applying it to the upstream gradient of a path before continuing
/// the reverse pass turns gradient descent below that point into ascent on
/// the path's loss, which is how the adversarial min-max objectives here are
/// realized as single descent steps.
pub fn grad_reverse(grad: &Matrix, lambda: f64) -> Matrix {
    grad.scale(-lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_direct_evaluation() {
        let logits = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let p = softmax_rows(&logits);
        for r in 0..2 {
            let s: f64 = p.row(r).iter().sum();
            assert!(close(s, 1.0, 1e-12));
        }
        // Direct evaluation of row 0 without max subtraction.
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for c in 0..3 {
            assert!(close(p.get(0, c), ((c + 1) as f64).exp() / denom, 1e-12));
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_survives_large_logits() {
        let logits = Matrix::new(1, 3, vec![1000.0, 1001.0, 999.0]).unwrap();
        let shifted = Matrix::new(1, 3, vec![0.0, 1.0, -1.0]).unwrap();
        let a = softmax_rows(&logits);
        let b = softmax_rows(&shifted);
        for c in 0..3 {
            assert!(close(a.get(0, c), b.get(0, c), 1e-12));
            assert!(a.get(0, c).is_finite());
        }
    }

    #[test]
    fn nll_gradient_is_softmax_minus_onehot() {
        let logits = Matrix::new(1, 3, vec![0.2, -0.1, 0.5]).unwrap();
        let (loss, grad) = nll_sum_with_grad(&logits, &[2]).unwrap();
        let p = softmax_rows(&logits);
        assert!(close(loss, -p.get(0, 2).ln(), 1e-12));
        assert!(close(grad.get(0, 0), p.get(0, 0), 1e-12));
        assert!(close(grad.get(0, 2), p.get(0, 2) - 1.0, 1e-12));
    }

    #[test]
    fn nll_of_certain_prediction_is_exactly_zero() {
        // A 100-logit gap rounds the winning softmax entry to exactly 1.0.
        let logits = Matrix::new(1, 2, vec![100.0, 0.0]).unwrap();
        let (loss, _) = nll_sum_with_grad(&logits, &[0]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn nll_rejects_bad_targets() {
        let logits = Matrix::zeros(2, 3);
        assert!(nll_sum_with_grad(&logits, &[0]).is_err());
        assert!(nll_sum_with_grad(&logits, &[0, 3]).is_err());
    }

    #[test]
    fn grad_reverse_scales_by_minus_lambda() {
        let g = Matrix::new(2, 2, vec![1.0, -2.0, 0.5, 0.0]).unwrap();
        let r = grad_reverse(&g, 1.0);
        assert_eq!(r.data(), &[-1.0, 2.0, -0.5, 0.0]);
        let r2 = grad_reverse(&g, 0.25);
        assert_eq!(r2.data(), &[-0.25, 0.5, -0.125, 0.0]);
        // Reversing twice with lambda 1 is the identity.
        assert_eq!(grad_reverse(&r, 1.0), g);
    }
}
