//! Activation and loss kernels with their closed-form gradients.

use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub fn relu(x: &Tensor2) -> Tensor2 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Derivative mask of ReLU: 1 where `x > 0`, else 0 (including at exactly 0).
pub fn relu_mask(x: &Tensor2) -> Tensor2 {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Multiplies `grad` in place by the ReLU derivative evaluated at `pre`.
pub fn relu_backward_inplace(grad: &mut Tensor2, pre: &Tensor2) {
    for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Stable `log(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of `logits` against a class index.
///
/// Returns the loss `-log softmax(logits)[target]` and its gradient with
/// respect to the logits, `softmax(logits) - onehot(target)`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Argument(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let loss = log_sum_exp(logits) - logits[target];
    let mut grad = softmax(logits)?;
    grad[target] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// Mean squared error `(1/d) Σ (a_i - b_i)²` and its gradient with respect to
/// `a`. The gradient with respect to `b` is the negation.
pub fn mse(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::dim("mse", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Argument("mse of empty vectors".into()));
    }
    let d = a.len() as f64;
    let mut loss = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let diff = x - y;
            loss += diff * diff;
            2.0 * diff / d
        })
        .collect();
    Ok((loss / d, grad))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn relu_definition_and_mask() {
        let x = Tensor2::row_vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor2::row_vector(vec![0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
        let m = relu_mask(&Tensor2::row_vector(vec![-1.0, 2.0]));
        assert_eq!(m.data(), &[0.0, 1.0]);
        assert_eq!(relu_mask(&Tensor2::row_vector(vec![0.0])).data(), &[0.0]);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in p {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-15);
        assert!(p[1] < 1e-300);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (x, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert_abs_diff_eq!(*x, want, epsilon = 1e-15);
        }
        assert!(matches!(softmax(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = cross_entropy(&[0.0; 6], 3).unwrap();
        assert_abs_diff_eq!(l, 6f64.ln(), epsilon = 1e-15);
        let (l, _) = cross_entropy(&[20.0, -20.0], 0).unwrap();
        assert!(l < 1e-15);
        let (l, _) = cross_entropy(&[0.0, 3f64.ln()], 0).unwrap();
        assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-15);
        assert!(cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap().0, 1.0);
        let (l, g) = mse(&[1.0, 2.0], &[3.0, 0.0]).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g, vec![-2.0, 2.0]);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let p = softmax(&v).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cross_entropy_gradient_sums_to_zero(
            v in prop::collection::vec(-10.0f64..10.0, 2..10),
            t in 0usize..100,
        ) {
            let target = t % v.len();
            let (loss, g) = cross_entropy(&v, target).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
