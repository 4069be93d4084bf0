//! Elementary numeric ops shared by losses and layers: stable softmax,
//! temperature scaling, log-probabilities, one-hot encoding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1, Axis};

/// Numerically stable softmax of one logit vector.
pub fn softmax<F: Scalar>(logits: ArrayView1<'_, F>) -> Array1<F> {
    let max = logits.fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Temperature-scaled softmax: `softmax(logits / temp)`.
///
/// `temp = 1` reduces to the plain softmax. Errors when `temp <= 0`.
pub fn softmax_with_temperature<F: Scalar>(
    logits: ArrayView1<'_, F>,
    temp: F,
) -> Result<Array1<F>> {
    if temp <= F::zero() {
        return Err(Error::argument(format!(
            "softmax temperature must be positive, got {temp}"
        )));
    }
    Ok(softmax(logits.mapv(|z| z / temp).view()))
}

/// Row-wise softmax of a batch of logits, optionally temperature-scaled.
pub fn softmax_rows<F: Scalar>(logits: &Array2<F>, temp: F) -> Array2<F> {
    let mut out = logits.clone();
    if temp != F::one() {
        out.mapv_inplace(|z| z / temp);
    }
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax (stable log-probabilities).
pub fn log_softmax_rows<F: Scalar>(logits: &Array2<F>, temp: F) -> Array2<F> {
    let mut out = logits.clone();
    if temp != F::one() {
        out.mapv_inplace(|z| z / temp);
    }
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
        let log_sum = row.fold(F::zero(), |s, &z| s + (z - max).exp()).ln() + max;
        row.mapv_inplace(|z| z - log_sum);
    }
    out
}

/// One-hot rows for a label slice.
pub fn one_hot<F: Scalar>(labels: &[usize], num_classes: usize) -> Array2<F> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        out[[i, y]] = F::one();
    }
    out
}

/// Mean cross-entropy of a batch of logits against integer labels,
/// together with its gradient w.r.t. the logits (`(p - onehot) / batch`).
pub fn cross_entropy_mean<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> (F, Array2<F>) {
    let batch = logits.nrows();
    assert_eq!(batch, labels.len(), "label count must match batch size");
    let log_p = log_softmax_rows(logits, F::one());
    let mut loss = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        loss = loss - log_p[[i, y]];
    }
    let inv_b = F::cast(1.0 / batch as f64);
    loss = loss * inv_b;
    let mut grad = softmax_rows(logits, F::one());
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] = grad[[i, y]] - F::one();
    }
    grad.mapv_inplace(|g| g * inv_b);
    (loss, grad)
}

/// Per-sample cross-entropy losses (no reduction), as f64 for metric use.
pub fn cross_entropy_per_sample<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> Vec<f64> {
    let log_p = log_softmax_rows(logits, F::one());
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_p[[i, y]].to_f64_lossy())
        .collect()
}

/// Top-1 predictions per row.
pub fn argmax_rows<F: Scalar>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(array![0.0f64, 0.0, 0.0].view());
        for &v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // any temperature keeps symmetry
        let p = softmax_with_temperature(array![0.0f64, 0.0, 0.0].view(), 7.3).unwrap();
        for &v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_two_logits() {
        // logits (2, 0) at temp 1: (e^2/(e^2+1), 1/(e^2+1))
        let p = softmax_with_temperature(array![2.0f64, 0.0].view(), 1.0).unwrap();
        let e2 = 2.0f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.8808).abs() < 1e-4);
        assert!((p[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn high_temperature_flattens() {
        let p = softmax_with_temperature(array![1.0f64, 0.0].view(), 1e9).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-9);
        assert!((p[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        assert!(softmax_with_temperature(array![1.0f64, 0.0].view(), 0.0).is_err());
        assert!(softmax_with_temperature(array![1.0f64, 0.0].view(), -2.0).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_permutation_equivariant() {
        let logits = array![0.3f64, -1.2, 4.0, 2.2];
        let p = softmax(logits.view());
        assert!((p.sum() - 1.0).abs() < 1e-12);
        let perm = array![4.0f64, 2.2, 0.3, -1.2];
        let q = softmax(perm.view());
        assert!((p[2] - q[0]).abs() < 1e-12);
        assert!((p[3] - q[1]).abs() < 1e-12);
        assert!((p[0] - q[2]).abs() < 1e-12);
        assert!((p[1] - q[3]).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let logits = Array2::<f64>::zeros((2, 10));
        let (loss, _) = cross_entropy_mean(&logits, &[3, 7]);
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);
    }
}
