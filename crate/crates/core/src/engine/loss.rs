//! Softmax cross-entropy, computed in double precision from the logits.

use alloc::vec::Vec;

use crate::{Scalar, Tensor};

/// Row-wise softmax.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.sample_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let e: Vec<f64> = row.iter().map(|v| libm::exp(v.as_f64() - m)).collect();
        let s: f64 = e.iter().sum();
        row.iter_mut().zip(&e).for_each(|(v, &ei)| *v = T::of(ei / s));
    }
    out
}

/// Per-sample losses `-log softmax(z)_y` and their gradients with respect to
/// each sample's own logits (`softmax(z) - onehot(y)`).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (Vec<f64>, Tensor<T>) {
    let k = logits.sample_len();
    assert_eq!(labels.len(), logits.batch(), "one label per sample");
    let mut grad = logits.clone();
    let mut losses = Vec::with_capacity(labels.len());
    for (row, &y) in grad.data_mut().chunks_mut(k).zip(labels) {
        let z: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let s: f64 = z.iter().map(|&v| libm::exp(v - m)).sum();
        let lse = m + libm::log(s);
        losses.push(lse - z[y]);
        for (j, v) in row.iter_mut().enumerate() {
            let p = libm::exp(z[j] - lse);
            *v = T::of(if j == y { p - 1.0 } else { p });
        }
    }
    (losses, grad)
}

/// Batch-mean cross-entropy and its gradient.
pub fn mean_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let (losses, mut grad) = softmax_cross_entropy(logits, labels);
    let n = labels.len().max(1) as f64;
    grad.data_mut().iter_mut().for_each(|g| *g = T::of(g.as_f64() / n));
    (losses.iter().sum::<f64>() / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let z = Tensor::<f64>::zeros(&[2, 10]);
        let (l, _) = mean_cross_entropy(&z, &[3, 7]);
        assert!((l - libm::log(10.0)).abs() < 1e-12);
        assert!((l - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn three_class_hand_value() {
        let z = Tensor::<f64>::from_vec(&[1, 3], alloc::vec![1.0, 0.0, 0.0]).unwrap();
        let (l, _) = mean_cross_entropy(&z, &[0]);
        let e = core::f64::consts::E;
        assert!((l - -libm::log(e / (e + 2.0))).abs() < 1e-12);
        assert!((l - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let z = Tensor::<f32>::from_vec(&[1, 3], alloc::vec![60.0, 0.0, 0.0]).unwrap();
        let (l, _) = mean_cross_entropy(&z, &[0]);
        assert!(l < 1e-20);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = Tensor::<f32>::from_vec(&[2, 4], alloc::vec![1.0, -2.0, 30.0, 0.5, 0.0, 0.0, 0.0, 100.0]).unwrap();
        let p = softmax(&z);
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
