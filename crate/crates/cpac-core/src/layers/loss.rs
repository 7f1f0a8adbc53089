//! Softmax cross-entropy loss for classification heads.

use crate::error::{CpacError, Result};
use crate::tensor::Tensor;

/// Loss value in nats plus its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct LossRecord {
    pub value: f64,
    /// Length-`C` gradient `softmax(y) - onehot(label)`; entries sum to 0.
    pub gradient: Tensor,
}

/// Numerically stable softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(y)[label]` with the max-subtraction stabilization.
pub fn softmax_xent(y_hat: &Tensor, label: usize) -> Result<LossRecord> {
    if y_hat.order() != 1 {
        return Err(CpacError::shape("logits must be a vector"));
    }
    let classes = y_hat.len();
    if label >= classes {
        return Err(CpacError::argument(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let logits = y_hat.data();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    let value = log_sum - logits[label];
    let mut gradient = softmax(logits);
    gradient[label] -= 1.0;
    Ok(LossRecord {
        value,
        gradient: Tensor::vector(gradient),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln_c() {
        let y = Tensor::from_fn(&[10], |_| 0.3);
        let rec = softmax_xent(&y, 4).unwrap();
        assert!((rec.value - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_true_class_is_stable() {
        let mut y = Tensor::zeros(&[4]);
        y.data_mut()[2] = 1000.0;
        let rec = softmax_xent(&y, 2).unwrap();
        assert!(rec.value.abs() < 1e-10);
        assert!(rec.gradient.data().iter().all(|v| v.abs() < 1e-10));
        assert!(rec.value.is_finite());
    }

    #[test]
    fn gradient_matches_finite_differences_and_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let y = Tensor::from_fn(&[6], |_| rng.gen_range(-2.0..2.0));
        let rec = softmax_xent(&y, 3).unwrap();
        assert!(rec.gradient.data().iter().sum::<f64>().abs() < 1e-12);
        assert!(rec.value >= 0.0);
        let h = 1e-6;
        for i in 0..6 {
            let mut plus = y.clone();
            plus.data_mut()[i] += h;
            let mut minus = y.clone();
            minus.data_mut()[i] -= h;
            let fd = (softmax_xent(&plus, 3).unwrap().value
                - softmax_xent(&minus, 3).unwrap().value)
                / (2.0 * h);
            let a = rec.gradient.data()[i];
            assert!((a - fd).abs() / fd.abs().max(1e-8) < 1e-7);
        }
    }

    #[test]
    fn label_out_of_range_is_an_argument_error() {
        let y = Tensor::zeros(&[3]);
        assert!(softmax_xent(&y, 3).is_err());
    }
}
