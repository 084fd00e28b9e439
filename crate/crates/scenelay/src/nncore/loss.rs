//! Squared-error regression loss.

/// Per-example loss: the squared Euclidean norm of the residual.
pub fn sq_err(pred: &[f64], gold: &[f64]) -> f64 {
    assert_eq!(pred.len(), gold.len());
    pred.iter().zip(gold).map(|(p, g)| (p - g) * (p - g)).sum()
}

/// d sq_err / d pred = 2 (pred − gold). Batch averaging is the caller's
/// concern: scale by 1/B when the objective is the batch mean.
pub fn sq_err_grad(pred: &[f64], gold: &[f64]) -> Vec<f64> {
    assert_eq!(pred.len(), gold.len());
    pred.iter().zip(gold).map(|(p, g)| 2.0 * (p - g)).collect()
}

/// Mean of per-example squared norms over a batch.
pub fn batch_loss(preds: &[Vec<f64>], golds: &[Vec<f64>]) -> f64 {
    assert_eq!(preds.len(), golds.len());
    assert!(!preds.is_empty(), "loss of an empty batch is undefined");
    preds
        .iter()
        .zip(golds)
        .map(|(p, g)| sq_err(p, g))
        .sum::<f64>()
        / preds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{numerical_grad, rel_err};
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_values() {
        assert_abs_diff_eq!(sq_err(&[1.0, 2.0], &[0.0, 4.0]), 5.0);
        assert_eq!(sq_err_grad(&[1.0, 2.0], &[0.0, 4.0]), vec![2.0, -4.0]);
        let preds = vec![vec![1.0, 2.0], vec![0.0, 0.0]];
        let golds = vec![vec![0.0, 4.0], vec![0.0, 0.0]];
        assert_abs_diff_eq!(batch_loss(&preds, &golds), 2.5);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let pred = vec![0.3, -1.7, 2.2, 0.0];
        let gold = vec![1.0, -1.0, 2.0, -0.5];
        let analytic = sq_err_grad(&pred, &gold);
        let numeric = numerical_grad(&pred, 1e-6, |p| sq_err(p, &gold));
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-7);
        }
    }
}
