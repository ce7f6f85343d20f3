//! Buffered SGD with per-structure gradient standardization and dynamic
//! quantization-parameter refresh.
//!
//! Weight gradients accumulate per layer in float buffers over `b`
//! successive single-sample steps, so memory is independent of the batch
//! size. At the end of each minibatch the accumulated gradient is
//! standardized per output structure (channel for convolutions, row for
//! linear layers) and applied; quantized weights derive fresh scale and
//! zero point from the candidate float values of the update itself.

mod sparse;
mod trainer;

pub use sparse::{select_structures, sparse_rate, update_count, SparseConfig, SparseState};
pub use trainer::{StepMetrics, TrainConfig, Trainer};

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::gradient_buffer_bytes;
use crate::layers::{LayerGrad, LayerSpec};
use crate::qcore::{derive_qparams, quantize, FTensor};

/// Lower bound on the standardization divisor; dead structures standardize
/// to zero instead of blowing up.
pub const SIGMA_FLOOR: f32 = 1e-8;

/// Per-layer gradient accumulation state.
///
/// Holds the float sum of per-sample weight and bias gradients plus
/// per-structure running statistics (Welford, population variance) over
/// every gradient value seen in the current minibatch. Zeroed after each
/// applied update.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    accum: FTensor,
    bias_accum: Vec<f32>,
    mean: Vec<f32>,
    m2: Vec<f32>,
    values_per_structure: u64,
    sample_count: u32,
    structures: usize,
    struct_elems: usize,
}

impl GradientBuffer {
    /// A zeroed buffer for a weight of the given shape (structure axis
    /// first) and bias length.
    pub fn new(weight_shape: &[usize], bias_len: usize) -> Result<Self> {
        if weight_shape.is_empty() {
            return Err(Error::ShapeMismatch("gradient buffer needs a weight shape".to_string()));
        }
        let structures = weight_shape[0];
        let struct_elems: usize = weight_shape[1..].iter().product::<usize>().max(1);
        Ok(Self {
            accum: FTensor::zeros(weight_shape.to_vec())?,
            bias_accum: vec![0.0; bias_len],
            mean: vec![0.0; structures],
            m2: vec![0.0; structures],
            values_per_structure: 0,
            sample_count: 0,
            structures,
            struct_elems,
        })
    }

    /// Test/support constructor with explicit internal state.
    pub fn from_raw_parts(
        accum: FTensor,
        bias_accum: Vec<f32>,
        mean: Vec<f32>,
        m2: Vec<f32>,
        values_per_structure: u64,
        sample_count: u32,
    ) -> Result<Self> {
        let structures = accum.shape()[0];
        if mean.len() != structures || m2.len() != structures {
            return Err(Error::ShapeMismatch("statistics length must match structures".to_string()));
        }
        let struct_elems: usize = accum.shape()[1..].iter().product::<usize>().max(1);
        Ok(Self {
            accum,
            bias_accum,
            mean,
            m2,
            values_per_structure,
            sample_count,
            structures,
            struct_elems,
        })
    }

    /// Adds one sample's gradients: sums into the accumulators and feeds
    /// every weight-gradient value into its structure's running statistics.
    pub fn accumulate(&mut self, grad: &LayerGrad) -> Result<()> {
        let dw = grad
            .d_weight
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("gradient carries no d_weight".to_string()))?;
        if dw.shape() != self.accum.shape() {
            return Err(Error::ShapeMismatch("gradient shape does not match buffer".to_string()));
        }
        let db = grad
            .d_bias
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("gradient carries no d_bias".to_string()))?;
        if db.len() != self.bias_accum.len() {
            return Err(Error::ShapeMismatch("bias gradient length mismatch".to_string()));
        }

        let data = dw.data();
        let base = self.values_per_structure;
        for c in 0..self.structures {
            let mut n = base;
            for e in 0..self.struct_elems {
                let x = data[c * self.struct_elems + e];
                n += 1;
                let delta = x - self.mean[c];
                self.mean[c] += delta / n as f32;
                self.m2[c] += delta * (x - self.mean[c]);
                self.accum.data_mut()[c * self.struct_elems + e] += x;
            }
        }
        for (acc, &g) in self.bias_accum.iter_mut().zip(db) {
            *acc += g;
        }
        self.values_per_structure += self.struct_elems as u64;
        self.sample_count += 1;
        Ok(())
    }

    pub fn sample_count(&self) -> u32 {
        self.sample_count
    }

    pub fn accum(&self) -> &FTensor {
        &self.accum
    }

    pub fn bias_accum(&self) -> &[f32] {
        &self.bias_accum
    }

    /// Running mean of structure `c`.
    pub fn mean(&self, c: usize) -> f32 {
        self.mean[c]
    }

    /// Population standard deviation of structure `c`, floored at
    /// [`SIGMA_FLOOR`].
    pub fn sigma(&self, c: usize) -> f32 {
        if self.values_per_structure == 0 {
            return SIGMA_FLOOR;
        }
        libm::sqrtf(self.m2[c] / self.values_per_structure as f32).max(SIGMA_FLOOR)
    }

    /// Buffer footprint in bytes; a function of the weight shape only.
    pub fn byte_size(&self) -> usize {
        gradient_buffer_bytes(self.accum.len(), self.bias_accum.len(), self.structures)
    }

    /// Zeroes accumulators and statistics.
    pub fn reset(&mut self) {
        for v in self.accum.data_mut() {
            *v = 0.0;
        }
        for v in &mut self.bias_accum {
            *v = 0.0;
        }
        for v in &mut self.mean {
            *v = 0.0;
        }
        for v in &mut self.m2 {
            *v = 0.0;
        }
        self.values_per_structure = 0;
        self.sample_count = 0;
    }
}

/// Applies one standardized SGD step to a layer's weights and zeroes the
/// buffer.
///
/// For quantized layers the float update candidates
/// `(w - z_w) * s_w - lr * (accum/b - mean) / sigma` determine fresh
/// qparams via their own min/max before the candidates are requantized;
/// the integer bias requantizes to the refreshed `s_w * s_x` scheme, with
/// `input_scale` supplying `s_x`. Float layers update in place.
pub fn apply_update(
    layer: &mut LayerSpec,
    buf: &mut GradientBuffer,
    learning_rate: f32,
    batch_size: u32,
    input_scale: f32,
) -> Result<()> {
    if buf.sample_count != batch_size {
        return Err(Error::MidBatchUpdate {
            have: buf.sample_count,
            need: batch_size,
        });
    }
    let b = batch_size as f32;
    match layer {
        LayerSpec::QConv2d { weight, bias, .. } | LayerSpec::QLinear { weight, bias, .. } => {
            if buf.accum.shape() != weight.shape() {
                return Err(Error::ShapeMismatch("buffer does not match layer weight".to_string()));
            }
            let sw = weight.qparams.scale;
            let zw = weight.qparams.zero_point as i32;
            let elems = buf.struct_elems;

            let mut candidates = Vec::with_capacity(weight.len());
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for c in 0..buf.structures {
                let mu = buf.mean[c];
                let sigma = buf.sigma(c);
                for e in 0..elems {
                    let idx = c * elems + e;
                    let g = (buf.accum.data()[idx] / b - mu) / sigma;
                    let f = (weight.data()[idx] as i32 - zw) as f32 * sw - learning_rate * g;
                    lo = lo.min(f);
                    hi = hi.max(f);
                    candidates.push(f);
                }
            }
            let new_qp = derive_qparams(lo, hi)?;
            for (q, f) in weight.data_mut().iter_mut().zip(&candidates) {
                *q = quantize(*f, new_qp);
            }
            let old_bias_scale = sw * input_scale;
            let new_bias_scale = new_qp.scale * input_scale;
            for (c, bq) in bias.iter_mut().enumerate() {
                let mu = buf.mean[c];
                let sigma = buf.sigma(c);
                let g = (buf.bias_accum[c] / b - mu) / sigma;
                let f = *bq as f32 * old_bias_scale - learning_rate * g;
                *bq = libm::floorf(f / new_bias_scale) as i32;
            }
            weight.qparams = new_qp;
        }
        LayerSpec::Conv2d { weight, bias, .. } | LayerSpec::Linear { weight, bias, .. } => {
            if buf.accum.shape() != weight.shape() {
                return Err(Error::ShapeMismatch("buffer does not match layer weight".to_string()));
            }
            let elems = buf.struct_elems;
            for c in 0..buf.structures {
                let mu = buf.mean[c];
                let sigma = buf.sigma(c);
                for e in 0..elems {
                    let idx = c * elems + e;
                    let g = (buf.accum.data()[idx] / b - mu) / sigma;
                    weight.data_mut()[idx] -= learning_rate * g;
                }
            }
            for (c, bv) in bias.iter_mut().enumerate() {
                let mu = buf.mean[c];
                let sigma = buf.sigma(c);
                let g = (buf.bias_accum[c] / b - mu) / sigma;
                *bv -= learning_rate * g;
            }
        }
        other => {
            return Err(Error::InvalidArgument(alloc::format!(
                "layer {} has no weights to update",
                other.kind()
            )))
        }
    }
    buf.reset();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LinearGeometry;
    use crate::qcore::{QTensor, QuantParams};

    fn grad(dw: &[f32], db: &[f32], shape: &[usize]) -> LayerGrad {
        LayerGrad {
            d_input: None,
            d_weight: Some(FTensor::new(shape.to_vec(), dw.to_vec()).unwrap()),
            d_bias: Some(db.to_vec()),
        }
    }

    #[test]
    fn zero_gradients_leave_zero_statistics() {
        let mut buf = GradientBuffer::new(&[2, 3], 2).unwrap();
        for _ in 0..4 {
            buf.accumulate(&grad(&[0.0; 6], &[0.0; 2], &[2, 3])).unwrap();
        }
        assert_eq!(buf.sample_count(), 4);
        assert!(buf.accum().data().iter().all(|&v| v == 0.0));
        for c in 0..2 {
            assert_eq!(buf.mean(c), 0.0);
            assert_eq!(buf.sigma(c), SIGMA_FLOOR);
        }
    }

    #[test]
    fn welford_matches_hand_computation() {
        // two samples with per-structure gradients 1.0 and 3.0
        let mut buf = GradientBuffer::new(&[1, 1], 1).unwrap();
        buf.accumulate(&grad(&[1.0], &[0.0], &[1, 1])).unwrap();
        buf.accumulate(&grad(&[3.0], &[0.0], &[1, 1])).unwrap();
        assert!((buf.mean(0) - 2.0).abs() < 1e-6);
        assert!((buf.sigma(0) - 1.0).abs() < 1e-6); // population convention
        assert_eq!(buf.accum().data(), &[4.0]);
    }

    #[test]
    fn byte_size_is_architecture_only() {
        let a = GradientBuffer::new(&[8, 3, 3, 3], 8).unwrap();
        let mut b = GradientBuffer::new(&[8, 3, 3, 3], 8).unwrap();
        // accumulating any number of samples never changes the footprint
        for _ in 0..48 {
            b.accumulate(&grad(&[0.125; 216], &[1.0; 8], &[8, 3, 3, 3])).unwrap();
        }
        assert_eq!(a.byte_size(), b.byte_size());
    }

    #[test]
    fn update_rejected_mid_batch() {
        let mut buf = GradientBuffer::new(&[1, 1], 1).unwrap();
        buf.accumulate(&grad(&[1.0], &[0.0], &[1, 1])).unwrap();
        let mut layer = LayerSpec::Linear {
            geom: LinearGeometry { in_features: 1, out_features: 1 },
            weight: FTensor::new(vec![1, 1], vec![1.0]).unwrap(),
            bias: vec![0.0],
        };
        let err = apply_update(&mut layer, &mut buf, 0.1, 8, 1.0).unwrap_err();
        assert!(matches!(err, Error::MidBatchUpdate { have: 1, need: 8 }));
    }

    #[test]
    fn pinned_update_example() {
        // single weight dequantizing to 1.0, accumulated grad 1.0 with
        // stipulated statistics mean 0 / sigma 1, lr 0.1 -> about 0.9
        let weight = QTensor::new(vec![1, 1], vec![200], QuantParams { scale: 0.01, zero_point: 100 })
            .unwrap();
        assert_eq!(weight.dequant_at(0), 1.0);
        let mut layer = LayerSpec::QLinear {
            geom: LinearGeometry { in_features: 1, out_features: 1 },
            weight,
            bias: vec![0],
        };
        let mut buf = GradientBuffer::from_raw_parts(
            FTensor::new(vec![1, 1], vec![1.0]).unwrap(),
            vec![0.0],
            vec![0.0],
            vec![1.0], // m2 = 1 over n = 1 values -> sigma = 1
            1,
            1,
        )
        .unwrap();
        apply_update(&mut layer, &mut buf, 0.1, 1, 1.0).unwrap();
        let LayerSpec::QLinear { weight, .. } = &layer else { unreachable!() };
        assert!(
            (weight.dequant_at(0) - 0.9).abs() <= weight.qparams.scale + 1e-6,
            "got {}",
            weight.dequant_at(0)
        );
        // buffer zeroed after the update
        assert_eq!(buf.sample_count(), 0);
        assert!(buf.accum().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_update_preserves_weights_within_one_step() {
        let floats = FTensor::new(vec![2, 2], vec![-0.4, 0.1, 0.8, -0.9]).unwrap();
        let weight = crate::qcore::quantize_tensor(&floats).unwrap();
        let before: Vec<f32> = (0..4).map(|i| weight.dequant_at(i)).collect();
        let mut layer = LayerSpec::QLinear {
            geom: LinearGeometry { in_features: 2, out_features: 2 },
            weight,
            bias: vec![0, 0],
        };
        let mut buf = GradientBuffer::new(&[2, 2], 2).unwrap();
        for _ in 0..3 {
            buf.accumulate(&grad(&[0.0; 4], &[0.0; 2], &[2, 2])).unwrap();
        }
        apply_update(&mut layer, &mut buf, 0.5, 3, 1.0).unwrap();
        let LayerSpec::QLinear { weight, .. } = &layer else { unreachable!() };
        for (i, b) in before.iter().enumerate() {
            assert!(
                (weight.dequant_at(i) - b).abs() <= weight.qparams.scale + 1e-6,
                "element {i}: {} vs {b}",
                weight.dequant_at(i)
            );
        }
    }

    #[test]
    fn refreshed_qparams_match_candidate_range_exactly() {
        let floats = FTensor::new(vec![2, 3], vec![-0.4, 0.1, 0.8, -0.9, 0.3, 0.6]).unwrap();
        let weight = crate::qcore::quantize_tensor(&floats).unwrap();
        let sw = weight.qparams.scale;
        let zw = weight.qparams.zero_point as i32;
        let w_data = weight.data().to_vec();
        let mut layer = LayerSpec::QLinear {
            geom: LinearGeometry { in_features: 3, out_features: 2 },
            weight,
            bias: vec![0, 0],
        };
        let mut buf = GradientBuffer::new(&[2, 3], 2).unwrap();
        let g = [0.5, -0.2, 0.9, 0.1, -0.7, 0.3];
        buf.accumulate(&grad(&g, &[0.1, -0.1], &[2, 3])).unwrap();
        // recompute the candidates the update will see
        let mut expect_lo = f32::INFINITY;
        let mut expect_hi = f32::NEG_INFINITY;
        for c in 0..2 {
            let mu = buf.mean(c);
            let sigma = buf.sigma(c);
            for e in 0..3 {
                let idx = c * 3 + e;
                let f = (w_data[idx] as i32 - zw) as f32 * sw
                    - 0.05 * (g[idx] / 1.0 - mu) / sigma;
                expect_lo = expect_lo.min(f);
                expect_hi = expect_hi.max(f);
            }
        }
        apply_update(&mut layer, &mut buf, 0.05, 1, 1.0).unwrap();
        let LayerSpec::QLinear { weight, .. } = &layer else { unreachable!() };
        let expect = derive_qparams(expect_lo, expect_hi).unwrap();
        assert_eq!(weight.qparams, expect);
    }

    #[test]
    fn standardization_absorbs_constant_shift() {
        // same gradients, shifted by a constant in one structure: the
        // standardized update direction is unchanged
        let run = |shift: f32| -> Vec<f32> {
            let mut layer = LayerSpec::Linear {
                geom: LinearGeometry { in_features: 3, out_features: 1 },
                weight: FTensor::new(vec![1, 3], vec![0.5, -0.5, 0.25]).unwrap(),
                bias: vec![0.0],
            };
            let mut buf = GradientBuffer::new(&[1, 3], 1).unwrap();
            for s in 0..4 {
                let base = s as f32 * 0.3;
                let dw = [base + shift, -base + shift, 0.1 * s as f32 + shift];
                buf.accumulate(&grad(&dw, &[0.0], &[1, 3])).unwrap();
            }
            apply_update(&mut layer, &mut buf, 0.1, 4, 1.0).unwrap();
            let LayerSpec::Linear { weight, .. } = &layer else { unreachable!() };
            weight.data().to_vec()
        };
        let plain = run(0.0);
        let shifted = run(5.0);
        for (a, b) in plain.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
