//! Softmax cross-entropy loss.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::qcore::FTensor;

/// Numerically stabilized softmax cross-entropy.
///
/// Returns the loss `-ln p[label]` and its gradient w.r.t. the logits,
/// `p - onehot(label)`.
pub fn softmax_xent(logits: &FTensor, label: usize) -> Result<(f32, FTensor)> {
    let n = logits.len();
    if logits.shape().len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "softmax_xent expects rank-1 logits, got {:?}",
            logits.shape()
        )));
    }
    if label >= n {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    let xs = logits.data();
    let mut max = f32::NEG_INFINITY;
    for &v in xs {
        max = max.max(v);
    }
    // f64 accumulation keeps tiny losses of confident predictions from
    // underflowing to zero
    let mut denom = 0.0f64;
    let exps: Vec<f64> = xs
        .iter()
        .map(|&v| {
            let e = libm::exp((v - max) as f64);
            denom += e;
            e
        })
        .collect();
    let mut grad = Vec::with_capacity(n);
    for (i, e) in exps.iter().enumerate() {
        let p = e / denom;
        grad.push(if i == label { (p - 1.0) as f32 } else { p as f32 });
    }
    // -ln(p[label]) via the stabilized form: ln(denom) - (x[label] - max)
    let loss = (libm::log(denom) - (xs[label] - max) as f64) as f32;
    Ok((loss, FTensor::new(logits.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 5, 10] {
            let logits = FTensor::new(vec![c], vec![0.7; c]).unwrap();
            let (loss, grad) = softmax_xent(&logits, 0).unwrap();
            assert!((loss - libm::logf(c as f32)).abs() < 1e-6);
            let inv = 1.0 / c as f32;
            assert!((grad.data()[0] - (inv - 1.0)).abs() < 1e-6);
            for &g in &grad.data()[1..] {
                assert!((g - inv).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn confident_correct_logit_has_tiny_loss() {
        let logits = FTensor::new(vec![2], vec![10.0, -10.0]).unwrap();
        let (loss, grad) = softmax_xent(&logits, 0).unwrap();
        // closed form: loss = ln(1 + e^-20) ~= e^-20 ~= 2.061e-9
        assert!((loss - 2.0611536e-9).abs() < 1e-12, "loss {loss:e}");
        assert!(grad.data()[0] < 0.0 && grad.data()[0].abs() < 1e-8);
        assert!(grad.data()[1] > 0.0 && grad.data()[1].abs() < 1e-8);
    }

    #[test]
    fn gradient_sums_to_zero() {
        let logits = FTensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let (_, grad) = softmax_xent(&logits, 2).unwrap();
        let s: f32 = grad.data().iter().sum();
        assert!(s.abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = FTensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
        assert!(softmax_xent(&logits, 3).is_err());
    }
}
