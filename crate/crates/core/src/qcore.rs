//! Linear quantization primitives.
//!
//! The engine stores weights, activations, and propagated errors as
//! unsigned 8-bit tensors under the per-tensor affine map
//! `v_q = floor(v_f / scale) + zero_point`. Rounding is floor everywhere,
//! and writes saturate to `[0, 255]`.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Per-tensor scale and zero point of the affine quantization map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// Real value represented by one quantized step. Always positive.
    pub scale: f32,
    /// The quantized value that dequantizes to exactly 0.0.
    pub zero_point: u8,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: u8) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(
                "quantization scale must be positive and finite".to_string(),
            ));
        }
        Ok(Self { scale, zero_point })
    }
}

impl fmt::Display for QuantParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(s={}, z={})", self.scale, self.zero_point)
    }
}

/// Derives quantization parameters from an observed float range.
///
/// The range is widened to include 0.0 so that zero is always exactly
/// representable. A degenerate range (`f_min == f_max`) falls back to
/// `scale = 1/255` with the zero point clamped from `floor(-f_min * 255)`;
/// constant tensors then quantize to a single repeated value that still
/// round-trips within one step.
pub fn derive_qparams(f_min: f32, f_max: f32) -> Result<QuantParams> {
    if !f_min.is_finite() || !f_max.is_finite() || f_min > f_max {
        return Err(Error::InvalidArgument(
            "range must be finite with f_min <= f_max".to_string(),
        ));
    }
    if f_min == f_max {
        let scale = 1.0 / 255.0;
        let zero_point = libm::floorf(-f_min * 255.0) as u8; // saturating cast
        return Ok(QuantParams { scale, zero_point });
    }
    let lo = f_min.min(0.0);
    let hi = f_max.max(0.0);
    let scale = (hi - lo) / 255.0;
    let zero_point = libm::floorf(-lo / scale) as u8;
    Ok(QuantParams { scale, zero_point })
}

/// Quantizes one value: `floor(v / scale) + zero_point`, saturated to `[0, 255]`.
///
/// Saturation absorbs out-of-range and non-finite inputs, so this never fails.
pub fn quantize(v: f32, qp: QuantParams) -> u8 {
    (libm::floorf(v / qp.scale) + qp.zero_point as f32) as u8
}

/// Dequantizes one value: `(q - zero_point) * scale`.
pub fn dequantize(q: u8, qp: QuantParams) -> f32 {
    (q as i32 - qp.zero_point as i32) as f32 * qp.scale
}

/// Shape + 8-bit payload + quantization parameters. Row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<u8>,
    pub qparams: QuantParams,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>, qparams: QuantParams) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() || expect == 0 {
            return Err(Error::ShapeMismatch("tensor shape must be non-empty".to_string()));
        }
        if data.len() != expect {
            return Err(Error::ShapeMismatch(alloc::format!(
                "payload length {} does not match shape product {}",
                data.len(),
                expect
            )));
        }
        Ok(Self { shape, data, qparams })
    }

    /// Tensor filled with a single quantized value.
    pub fn filled(shape: Vec<usize>, value: u8, qparams: QuantParams) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![value; n], qparams)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Dequantized value at a flat index.
    pub fn dequant_at(&self, idx: usize) -> f32 {
        dequantize(self.data[idx], self.qparams)
    }

    /// Same payload under a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<QTensor> {
        QTensor::new(shape, self.data.clone(), self.qparams)
    }
}

/// Shape + 32-bit float payload, row-major. Carrier for float-precision
/// layers and gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct FTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() || expect == 0 {
            return Err(Error::ShapeMismatch("tensor shape must be non-empty".to_string()));
        }
        if data.len() != expect {
            return Err(Error::ShapeMismatch(alloc::format!(
                "payload length {} does not match shape product {}",
                data.len(),
                expect
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (min, max) over the payload.
    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Same payload under a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<FTensor> {
        FTensor::new(shape, self.data.clone())
    }
}

/// Quantizes a float tensor, deriving qparams from its own min/max.
pub fn quantize_tensor(t: &FTensor) -> Result<QTensor> {
    if t.is_empty() {
        return Err(Error::ShapeMismatch("cannot quantize an empty tensor".to_string()));
    }
    let (lo, hi) = t.min_max();
    let qp = derive_qparams(lo, hi)?;
    let data = t.data().iter().map(|&v| quantize(v, qp)).collect();
    QTensor::new(t.shape().to_vec(), data, qp)
}

/// Dequantizes every element into a float tensor of the same shape.
pub fn dequantize_tensor(t: &QTensor) -> FTensor {
    let data = t.data().iter().map(|&q| dequantize(q, t.qparams)).collect();
    FTensor {
        shape: t.shape().to_vec(),
        data,
    }
}

/// A tensor in either precision. The universal payload flowing between
/// layers; which variant is legal at a given position is fixed by model
/// validation.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Q(QTensor),
    F(FTensor),
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Q(t) => t.shape(),
            Value::F(t) => t.shape(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Value::Q(t) => t.len(),
            Value::F(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Value::Q(_))
    }

    /// Dequantized view of element `idx` regardless of variant.
    pub fn float_at(&self, idx: usize) -> f32 {
        match self {
            Value::Q(t) => t.dequant_at(idx),
            Value::F(t) => t.data()[idx],
        }
    }

    /// Converts into a float tensor, dequantizing if necessary.
    pub fn to_float(&self) -> FTensor {
        match self {
            Value::Q(t) => dequantize_tensor(t),
            Value::F(t) => t.clone(),
        }
    }

    /// Same payload under a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Value> {
        match self {
            Value::Q(t) => Ok(Value::Q(t.reshape(shape)?)),
            Value::F(t) => Ok(Value::F(t.reshape(shape)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp(scale: f32, zero_point: u8) -> QuantParams {
        QuantParams { scale, zero_point }
    }

    #[test]
    fn derive_matches_hand_evaluated_range() {
        let p = derive_qparams(-1.0, 1.55).unwrap();
        assert!((p.scale - 0.01).abs() < 1e-7, "scale {}", p.scale);
        assert_eq!(p.zero_point, 100);
    }

    #[test]
    fn derive_identity_scale() {
        let p = derive_qparams(0.0, 255.0).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn derive_symmetric_range() {
        let p = derive_qparams(-127.5, 127.5).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero_point, 127);
    }

    #[test]
    fn derive_widens_positive_range_to_zero() {
        let p = derive_qparams(1.0, 2.0).unwrap();
        assert!((p.scale - 2.0 / 255.0).abs() < 1e-7);
        assert_eq!(p.zero_point, 0);
        // zero must dequantize exactly
        assert_eq!(dequantize(quantize(0.0, p), p), 0.0);
    }

    #[test]
    fn derive_degenerate_range_falls_back() {
        let p = derive_qparams(0.0, 0.0).unwrap();
        assert!((p.scale - 1.0 / 255.0).abs() < 1e-9);
        assert_eq!(p.zero_point, 0);

        let p = derive_qparams(0.5, 0.5).unwrap();
        assert!((p.scale - 1.0 / 255.0).abs() < 1e-9);
        assert_eq!(p.zero_point, 0);
        // the constant still round-trips within one step
        let q = quantize(0.5, p);
        assert!((dequantize(q, p) - 0.5).abs() <= p.scale);
    }

    #[test]
    fn derive_rejects_bad_ranges() {
        assert!(derive_qparams(1.0, 0.0).is_err());
        assert!(derive_qparams(f32::NAN, 1.0).is_err());
    }

    #[test]
    fn quantize_zero_maps_to_zero_point() {
        assert_eq!(quantize(0.0, qp(0.37, 10)), 10);
    }

    #[test]
    fn quantize_floors() {
        assert_eq!(quantize(2.0, qp(0.5, 10)), 14);
        assert_eq!(quantize(1.99, qp(0.5, 10)), 13);
    }

    #[test]
    fn quantize_saturates() {
        assert_eq!(quantize(1000.0, qp(0.5, 10)), 255);
        assert_eq!(quantize(-1000.0, qp(0.5, 10)), 0);
        assert_eq!(quantize(f32::INFINITY, qp(0.5, 10)), 255);
    }

    #[test]
    fn dequantize_inverts() {
        assert_eq!(dequantize(10, qp(0.5, 10)), 0.0);
        assert_eq!(dequantize(14, qp(0.5, 10)), 2.0);
    }

    #[test]
    fn round_trip_within_one_step() {
        let p = qp(0.01, 100);
        let v = 1.37;
        let back = dequantize(quantize(v, p), p);
        assert!((back - v).abs() <= 0.01 + 1e-6, "got {back}");
    }

    #[test]
    fn tensor_round_trip_examples() {
        let t = FTensor::new(vec![3], vec![-1.0, 0.0, 1.55]).unwrap();
        let q = quantize_tensor(&t).unwrap();
        assert!((q.qparams.scale - 0.01).abs() < 1e-7);
        assert_eq!(q.qparams.zero_point, 100);
        assert_eq!(q.data(), &[0, 100, 255]);
    }

    #[test]
    fn all_zero_tensor_quantizes_to_zero_point() {
        let t = FTensor::zeros(vec![2, 3]).unwrap();
        let q = quantize_tensor(&t).unwrap();
        for &v in q.data() {
            assert_eq!(v, q.qparams.zero_point);
        }
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(FTensor::new(vec![], vec![]).is_err());
        assert!(QTensor::new(vec![0], vec![], qp(1.0, 0)).is_err());
        assert!(QTensor::new(vec![2], vec![1], qp(1.0, 0)).is_err());
    }
}
