//! Quantized kernels: integer accumulation, floored requantization.
//!
//! Every dot product runs as `sum((w - z_w) * (x - z_x))` in `i32`; the
//! accumulator is mapped back to 8 bits through
//! `floor(s_w * s_x / s_out * acc) + z_out` with saturation. Kernels also
//! report the true float range of their pre-quantization results so the
//! caller can refresh calibration.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{ConvGeometry, ValueRange};
use crate::qcore::{FTensor, QTensor, QuantParams};

/// Result of a quantized backward kernel. Fields are present according to
/// what the caller asked for: `d_input` requires target qparams, weight and
/// bias gradients require the cached forward input.
#[derive(Debug, Clone)]
pub struct QuantBackward {
    pub d_input: Option<(QTensor, ValueRange)>,
    pub d_weight: Option<FTensor>,
    pub d_bias: Option<Vec<f32>>,
}

#[inline]
fn requant(v: f64, out_qp: QuantParams) -> u8 {
    (libm::floor(v / out_qp.scale as f64) + out_qp.zero_point as f64) as u8
}

/// `y = requantize(W · x + bias)` for a rank-1 input.
///
/// The bias is interpreted at scale `s_w * s_x` with zero point 0, so it
/// adds directly into the integer accumulator.
pub fn qlinear_forward(
    x: &QTensor,
    w: &QTensor,
    bias: &[i32],
    out_qp: QuantParams,
) -> Result<(QTensor, ValueRange)> {
    let ws = w.shape();
    if ws.len() != 2 {
        return Err(Error::ShapeMismatch("qlinear weight must be rank 2".to_string()));
    }
    let (out_f, in_f) = (ws[0], ws[1]);
    if x.shape() != [in_f] {
        return Err(Error::ShapeMismatch(format!(
            "qlinear expects input [{in_f}], got {:?}",
            x.shape()
        )));
    }
    if bias.len() != out_f {
        return Err(Error::ShapeMismatch("qlinear bias length mismatch".to_string()));
    }

    let zw = w.qparams.zero_point as i32;
    let zx = x.qparams.zero_point as i32;
    let real = w.qparams.scale as f64 * x.qparams.scale as f64;
    let wd = w.data();
    let xd = x.data();

    let mut range = ValueRange::EMPTY;
    let mut out = Vec::with_capacity(out_f);
    for o in 0..out_f {
        let mut acc = bias[o];
        for (&wv, &xv) in wd[o * in_f..(o + 1) * in_f].iter().zip(xd) {
            acc += (wv as i32 - zw) * (xv as i32 - zx);
        }
        let v = real * acc as f64;
        range.observe(v as f32);
        out.push(requant(v, out_qp));
    }
    Ok((QTensor::new(vec![out_f], out, out_qp)?, range))
}

/// Backward of [`qlinear_forward`].
///
/// - `d_input` (computed when `e_in_qp` is given): requantized `Wᵀ · e`.
/// - `d_weight`/`d_bias` (computed when `x_cached` is given): the
///   dequantized outer product `e · xᵀ`, left in float.
/// - `selected` restricts the error to the given output rows; rows outside
///   the set contribute exactly zero everywhere.
pub fn qlinear_backward(
    e_out: &QTensor,
    x_cached: Option<&QTensor>,
    w: &QTensor,
    e_in_qp: Option<QuantParams>,
    selected: Option<&[usize]>,
) -> Result<QuantBackward> {
    let ws = w.shape();
    if ws.len() != 2 {
        return Err(Error::ShapeMismatch("qlinear weight must be rank 2".to_string()));
    }
    let (out_f, in_f) = (ws[0], ws[1]);
    if e_out.shape() != [out_f] {
        return Err(Error::ShapeMismatch(format!(
            "qlinear backward expects error [{out_f}], got {:?}",
            e_out.shape()
        )));
    }
    if let Some(x) = x_cached {
        if x.shape() != [in_f] {
            return Err(Error::ShapeMismatch("qlinear cached input shape mismatch".to_string()));
        }
    }

    let ze = e_out.qparams.zero_point as i32;
    let zw = w.qparams.zero_point as i32;
    let se = e_out.qparams.scale;
    let ed = e_out.data();
    let wd = w.data();

    let rows: Vec<usize> = match selected {
        Some(s) => s.to_vec(),
        None => (0..out_f).collect(),
    };
    for &o in &rows {
        if o >= out_f {
            return Err(Error::InvalidArgument(format!("selected row {o} out of range {out_f}")));
        }
    }

    let d_input = match e_in_qp {
        Some(qp) => {
            let mut acc = vec![0i32; in_f];
            for &o in &rows {
                let ei = ed[o] as i32 - ze;
                for (a, &wv) in acc.iter_mut().zip(&wd[o * in_f..(o + 1) * in_f]) {
                    *a += (wv as i32 - zw) * ei;
                }
            }
            let real = w.qparams.scale as f64 * se as f64;
            let mut range = ValueRange::EMPTY;
            let data: Vec<u8> = acc
                .iter()
                .map(|&a| {
                    let v = real * a as f64;
                    range.observe(v as f32);
                    requant(v, qp)
                })
                .collect();
            Some((QTensor::new(vec![in_f], data, qp)?, range))
        }
        None => None,
    };

    let (d_weight, d_bias) = match x_cached {
        Some(x) => {
            let zx = x.qparams.zero_point as i32;
            let factor = (se as f64 * x.qparams.scale as f64) as f32;
            let xd = x.data();
            let mut dw = vec![0.0f32; out_f * in_f];
            let mut db = vec![0.0f32; out_f];
            for &o in &rows {
                let ei = ed[o] as i32 - ze;
                db[o] = se * ei as f32;
                let row = &mut dw[o * in_f..(o + 1) * in_f];
                for (d, &xv) in row.iter_mut().zip(xd) {
                    *d = factor * (ei * (xv as i32 - zx)) as f32;
                }
            }
            (Some(FTensor::new(vec![out_f, in_f], dw)?), Some(db))
        }
        None => (None, None),
    };

    Ok(QuantBackward { d_input, d_weight, d_bias })
}

/// Quantized 2D convolution with optional fused ReLU (outputs clamped at
/// the zero point from below). Padding cells contribute nothing because the
/// padded value equals the input zero point.
pub fn qconv2d_forward(
    x: &QTensor,
    w: &QTensor,
    bias: &[i32],
    geom: &ConvGeometry,
    relu: bool,
    out_qp: QuantParams,
) -> Result<(QTensor, ValueRange)> {
    if x.shape() != [geom.in_channels, geom.in_h, geom.in_w] {
        return Err(Error::ShapeMismatch(format!(
            "qconv2d expects input {:?}, got {:?}",
            [geom.in_channels, geom.in_h, geom.in_w],
            x.shape()
        )));
    }
    if w.shape() != geom.weight_shape().as_slice() {
        return Err(Error::ShapeMismatch("qconv2d weight/geometry mismatch".to_string()));
    }
    if bias.len() != geom.out_channels {
        return Err(Error::ShapeMismatch("qconv2d bias length mismatch".to_string()));
    }

    let (c_in, h, wd_in) = (geom.in_channels, geom.in_h, geom.in_w);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let k = geom.kernel;
    let zw = w.qparams.zero_point as i32;
    let zx = x.qparams.zero_point as i32;
    let real = w.qparams.scale as f64 * x.qparams.scale as f64;
    let xd = x.data();
    let wdata = w.data();

    let mut range = ValueRange::EMPTY;
    let mut out = Vec::with_capacity(geom.out_channels * oh * ow);
    for oc in 0..geom.out_channels {
        let w_oc = &wdata[oc * c_in * k * k..(oc + 1) * c_in * k * k];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = bias[oc];
                for c in 0..c_in {
                    for ki in 0..k {
                        let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let x_row = &xd[c * h * wd_in + ii as usize * wd_in..];
                        let w_row = &w_oc[c * k * k + ki * k..];
                        for kj in 0..k {
                            let jj = (oj * geom.stride + kj) as isize - geom.padding as isize;
                            if jj < 0 || jj >= wd_in as isize {
                                continue;
                            }
                            acc += (w_row[kj] as i32 - zw) * (x_row[jj as usize] as i32 - zx);
                        }
                    }
                }
                let mut v = real * acc as f64;
                if relu && v < 0.0 {
                    v = 0.0;
                }
                range.observe(v as f32);
                out.push(requant(v, out_qp));
            }
        }
    }
    Ok((
        QTensor::new(vec![geom.out_channels, oh, ow], out, out_qp)?,
        range,
    ))
}

/// Backward of [`qconv2d_forward`].
///
/// `e_out` must already be ReLU-masked when the forward was folded.
/// `d_input` is the requantized transposed convolution of the error with
/// the weights; `d_weight` is the float cross-correlation of the cached
/// input with the error. `selected` restricts both to the given error
/// channels.
pub fn qconv2d_backward(
    e_out: &QTensor,
    x_cached: Option<&QTensor>,
    w: &QTensor,
    geom: &ConvGeometry,
    e_in_qp: Option<QuantParams>,
    selected: Option<&[usize]>,
) -> Result<QuantBackward> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    if e_out.shape() != [geom.out_channels, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "qconv2d backward expects error {:?}, got {:?}",
            [geom.out_channels, oh, ow],
            e_out.shape()
        )));
    }
    if w.shape() != geom.weight_shape().as_slice() {
        return Err(Error::ShapeMismatch("qconv2d weight/geometry mismatch".to_string()));
    }
    if let Some(x) = x_cached {
        if x.shape() != [geom.in_channels, geom.in_h, geom.in_w] {
            return Err(Error::ShapeMismatch("qconv2d cached input shape mismatch".to_string()));
        }
    }

    let (c_in, h, w_in) = (geom.in_channels, geom.in_h, geom.in_w);
    let k = geom.kernel;
    let ze = e_out.qparams.zero_point as i32;
    let zw = w.qparams.zero_point as i32;
    let se = e_out.qparams.scale;
    let ed = e_out.data();
    let wdata = w.data();

    let channels: Vec<usize> = match selected {
        Some(s) => s.to_vec(),
        None => (0..geom.out_channels).collect(),
    };
    for &oc in &channels {
        if oc >= geom.out_channels {
            return Err(Error::InvalidArgument(format!(
                "selected channel {oc} out of range {}",
                geom.out_channels
            )));
        }
    }

    let d_input = match e_in_qp {
        Some(qp) => {
            let mut acc = vec![0i32; c_in * h * w_in];
            for &oc in &channels {
                let w_oc = &wdata[oc * c_in * k * k..(oc + 1) * c_in * k * k];
                for oi in 0..oh {
                    for oj in 0..ow {
                        let ei = ed[(oc * oh + oi) * ow + oj] as i32 - ze;
                        for c in 0..c_in {
                            for ki in 0..k {
                                let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let jj =
                                        (oj * geom.stride + kj) as isize - geom.padding as isize;
                                    if jj < 0 || jj >= w_in as isize {
                                        continue;
                                    }
                                    acc[(c * h + ii as usize) * w_in + jj as usize] +=
                                        (w_oc[(c * k + ki) * k + kj] as i32 - zw) * ei;
                                }
                            }
                        }
                    }
                }
            }
            let real = w.qparams.scale as f64 * se as f64;
            let mut range = ValueRange::EMPTY;
            let data: Vec<u8> = acc
                .iter()
                .map(|&a| {
                    let v = real * a as f64;
                    range.observe(v as f32);
                    requant(v, qp)
                })
                .collect();
            Some((QTensor::new(vec![c_in, h, w_in], data, qp)?, range))
        }
        None => None,
    };

    let (d_weight, d_bias) = match x_cached {
        Some(x) => {
            let zx = x.qparams.zero_point as i32;
            let factor = (se as f64 * x.qparams.scale as f64) as f32;
            let xd = x.data();
            let mut dw = vec![0.0f32; geom.weight_len()];
            let mut db = vec![0.0f32; geom.out_channels];
            for &oc in &channels {
                let mut bias_acc = 0i32;
                for c in 0..c_in {
                    for ki in 0..k {
                        for kj in 0..k {
                            let mut acc = 0i32;
                            for oi in 0..oh {
                                let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for oj in 0..ow {
                                    let jj =
                                        (oj * geom.stride + kj) as isize - geom.padding as isize;
                                    if jj < 0 || jj >= w_in as isize {
                                        continue;
                                    }
                                    let ei = ed[(oc * oh + oi) * ow + oj] as i32 - ze;
                                    acc += ei
                                        * (xd[(c * h + ii as usize) * w_in + jj as usize] as i32
                                            - zx);
                                }
                            }
                            dw[((oc * c_in + c) * k + ki) * k + kj] = factor * acc as f32;
                        }
                    }
                }
                for oi in 0..oh {
                    for oj in 0..ow {
                        bias_acc += ed[(oc * oh + oi) * ow + oj] as i32 - ze;
                    }
                }
                db[oc] = se * bias_acc as f32;
            }
            (
                Some(FTensor::new(geom.weight_shape(), dw)?),
                Some(db),
            )
        }
        None => (None, None),
    };

    Ok(QuantBackward { d_input, d_weight, d_bias })
}

/// Quantized ReLU: clamp at the zero point from below. Keeps the input
/// qparams (no requantization) and returns the pass mask for backward.
pub fn relu_forward_q(x: &QTensor) -> (QTensor, Vec<bool>) {
    let z = x.qparams.zero_point;
    let data: Vec<u8> = x.data().iter().map(|&q| q.max(z)).collect();
    let mask: Vec<bool> = data.iter().map(|&q| q > z).collect();
    let out = QTensor::new(x.shape().to_vec(), data, x.qparams).expect("shape preserved");
    (out, mask)
}

/// Routes error through a quantized ReLU: positions where the forward
/// output sat at the zero point receive the error zero point.
pub fn relu_backward_q(e_out: &QTensor, mask: &[bool]) -> Result<QTensor> {
    if e_out.len() != mask.len() {
        return Err(Error::ShapeMismatch("relu mask length mismatch".to_string()));
    }
    let ze = e_out.qparams.zero_point;
    let data: Vec<u8> = e_out
        .data()
        .iter()
        .zip(mask)
        .map(|(&e, &m)| if m { e } else { ze })
        .collect();
    QTensor::new(e_out.shape().to_vec(), data, e_out.qparams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{dequantize, quantize, quantize_tensor, QuantParams};

    fn qp(scale: f32, zero_point: u8) -> QuantParams {
        QuantParams { scale, zero_point }
    }

    fn qt(shape: &[usize], floats: &[f32]) -> QTensor {
        quantize_tensor(&FTensor::new(shape.to_vec(), floats.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn qlinear_identity_weight_passes_value_through() {
        // single weight dequantizing to exactly 1.0
        let w = QTensor::new(vec![1, 1], vec![200], qp(0.01, 100)).unwrap();
        let x = QTensor::new(vec![1], vec![70], qp(0.05, 10)).unwrap(); // 3.0
        let out_qp = qp(0.05, 10);
        let (y, _) = qlinear_forward(&x, &w, &[0], out_qp).unwrap();
        assert!((y.dequant_at(0) - 3.0).abs() <= out_qp.scale + 1e-6);
    }

    #[test]
    fn qlinear_matches_float_matmul_within_one_step() {
        // dequantized w = [[1, 0], [0, 2]], x = [1.5, -0.5] -> y = [1.5, -1.0]
        let w = qt(&[2, 2], &[1.0, 0.0, 0.0, 2.0]);
        let x = qt(&[2], &[1.5, -0.5]);
        let out_qp = crate::qcore::derive_qparams(-1.5, 2.0).unwrap();
        let (y, _) = qlinear_forward(&x, &w, &[0, 0], out_qp).unwrap();
        // inputs carry quantization error themselves; allow a few steps total
        assert!((y.dequant_at(0) - 1.5).abs() <= 3.0 * out_qp.scale, "{}", y.dequant_at(0));
        assert!((y.dequant_at(1) - -1.0).abs() <= 3.0 * out_qp.scale, "{}", y.dequant_at(1));
    }

    #[test]
    fn qlinear_zero_input_propagates_zero() {
        let w = qt(&[3, 4], &[0.5, -0.25, 1.0, 0.0, 0.3, 0.2, -0.8, 0.1, 0.0, 0.9, -0.4, 0.6]);
        let x = QTensor::filled(vec![4], 7, qp(0.1, 7)).unwrap(); // all at zero point
        let out_qp = qp(0.02, 128);
        let (y, _) = qlinear_forward(&x, &w, &[0, 0, 0], out_qp).unwrap();
        assert!(y.data().iter().all(|&q| q == 128));
    }

    #[test]
    fn qlinear_backward_zero_error_gives_zero_grads() {
        let w = qt(&[2, 3], &[0.5, -0.25, 1.0, 0.0, 0.3, 0.2]);
        let x = qt(&[3], &[1.0, -1.0, 0.5]);
        let e = QTensor::filled(vec![2], 50, qp(0.01, 50)).unwrap();
        let g = qlinear_backward(&e, Some(&x), &w, Some(qp(0.01, 99)), None).unwrap();
        let (e_in, _) = g.d_input.unwrap();
        assert!(e_in.data().iter().all(|&q| q == 99));
        assert!(g.d_weight.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.d_bias.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qlinear_backward_matches_transposed_matmul() {
        // w = [[1, 0], [0, 2]] dequantized, e = [1, 1] -> wT e = [1, 2]
        let w = qt(&[2, 2], &[1.0, 0.0, 0.0, 2.0]);
        let e = qt(&[2], &[1.0, 1.0]);
        let e_in_qp = crate::qcore::derive_qparams(0.0, 2.5).unwrap();
        let g = qlinear_backward(&e, None, &w, Some(e_in_qp), None).unwrap();
        let (e_in, _) = g.d_input.unwrap();
        assert!((e_in.dequant_at(0) - 1.0).abs() <= 3.0 * e_in_qp.scale);
        assert!((e_in.dequant_at(1) - 2.0).abs() <= 3.0 * e_in_qp.scale);
    }

    #[test]
    fn qlinear_backward_weight_grad_is_outer_product() {
        let w = qt(&[2, 2], &[1.0, 0.0, 0.0, 2.0]);
        let x = qt(&[2], &[1.5, -0.5]);
        let e = qt(&[2], &[1.0, 1.0]);
        let g = qlinear_backward(&e, Some(&x), &w, None, None).unwrap();
        let dw = g.d_weight.unwrap();
        let tol = 2.0 * e.qparams.scale * x.qparams.scale
            + e.qparams.scale * 1.5
            + x.qparams.scale * 1.0; // input quantization error propagates
        let expect = [1.5, -0.5, 1.5, -0.5];
        for (got, want) in dw.data().iter().zip(expect) {
            assert!((got - want).abs() <= tol, "{got} vs {want}");
        }
        let db = g.d_bias.unwrap();
        assert!((db[0] - 1.0).abs() <= e.qparams.scale);
        assert!((db[1] - 1.0).abs() <= e.qparams.scale);
    }

    #[test]
    fn qconv_identity_kernel_passes_through() {
        let geom = ConvGeometry {
            in_channels: 1,
            in_h: 3,
            in_w: 3,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let w = QTensor::new(vec![1, 1, 1, 1], vec![200], qp(0.01, 100)).unwrap(); // 1.0
        let x = qt(&[1, 3, 3], &[0.1, 0.2, 0.3, -0.1, 0.0, 0.4, 0.5, -0.2, 0.25]);
        let out_qp = x.qparams;
        let (y, _) = qconv2d_forward(&x, &w, &[0], &geom, false, out_qp).unwrap();
        for i in 0..9 {
            assert!((y.dequant_at(i) - x.dequant_at(i)).abs() <= out_qp.scale + 1e-6);
        }
    }

    #[test]
    fn qconv_all_ones_sums_window() {
        let geom = ConvGeometry {
            in_channels: 1,
            in_h: 3,
            in_w: 3,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 0,
        };
        let w = qt(&[1, 1, 3, 3], &[1.0; 9]);
        let x = qt(&[1, 3, 3], &[1.0; 9]);
        let out_qp = crate::qcore::derive_qparams(0.0, 10.0).unwrap();
        let (y, _) = qconv2d_forward(&x, &w, &[0], &geom, false, out_qp).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert!((y.dequant_at(0) - 9.0).abs() <= 0.5, "{}", y.dequant_at(0));
    }

    #[test]
    fn qconv_folded_relu_floors_negatives() {
        let geom = ConvGeometry {
            in_channels: 1,
            in_h: 2,
            in_w: 2,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        // single weight dequantizing to -1.0, so every pre-activation is negative
        let w = QTensor::new(vec![1, 1, 1, 1], vec![0], qp(0.01, 100)).unwrap();
        let x = qt(&[1, 2, 2], &[0.5, 1.0, 0.25, 0.75]);
        let out_qp = qp(0.01, 30);
        let (y, _) = qconv2d_forward(&x, &w, &[0], &geom, true, out_qp).unwrap();
        assert!(y.data().iter().all(|&q| q == 30), "{:?}", y.data());
    }

    #[test]
    fn qconv_backward_zero_error() {
        let geom = ConvGeometry {
            in_channels: 2,
            in_h: 4,
            in_w: 4,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let w = qt(&[3, 2, 3, 3], &(0..54).map(|i| (i as f32 - 27.0) / 27.0).collect::<Vec<_>>());
        let e = QTensor::filled(vec![3, 4, 4], 77, qp(0.02, 77)).unwrap();
        let g = qconv2d_backward(&e, None, &w, &geom, Some(qp(0.01, 44)), None).unwrap();
        let (e_in, _) = g.d_input.unwrap();
        assert!(e_in.data().iter().all(|&q| q == 44));
    }

    #[test]
    fn qconv_backward_identity_kernel_routes_error() {
        let geom = ConvGeometry {
            in_channels: 1,
            in_h: 2,
            in_w: 2,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let w = QTensor::new(vec![1, 1, 1, 1], vec![200], qp(0.01, 100)).unwrap(); // 1.0
        let e = qt(&[1, 2, 2], &[0.5, -0.25, 0.125, 0.0]);
        let e_in_qp = e.qparams;
        let g = qconv2d_backward(&e, None, &w, &geom, Some(e_in_qp), None).unwrap();
        let (e_in, _) = g.d_input.unwrap();
        for i in 0..4 {
            assert!((e_in.dequant_at(i) - e.dequant_at(i)).abs() <= e_in_qp.scale + 1e-6);
        }
    }

    #[test]
    fn selected_rows_zero_out_the_rest() {
        let w = qt(&[4, 3], &(0..12).map(|i| i as f32 / 6.0 - 1.0).collect::<Vec<_>>());
        let x = qt(&[3], &[0.5, -0.5, 1.0]);
        let e = qt(&[4], &[1.0, -1.0, 0.5, 0.25]);
        let g = qlinear_backward(&e, Some(&x), &w, None, Some(&[1, 3])).unwrap();
        let dw = g.d_weight.unwrap();
        // rows 0 and 2 untouched
        assert!(dw.data()[0..3].iter().all(|&v| v == 0.0));
        assert!(dw.data()[6..9].iter().all(|&v| v == 0.0));
        // row 1 carries signal
        assert!(dw.data()[3..6].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn relu_q_clamps_and_masks() {
        let x = QTensor::new(vec![4], vec![10, 100, 99, 255], qp(0.01, 100)).unwrap();
        let (y, mask) = relu_forward_q(&x);
        assert_eq!(y.data(), &[100, 100, 100, 255]);
        assert_eq!(mask, [false, false, false, true]);
        let e = QTensor::new(vec![4], vec![1, 2, 3, 4], qp(0.5, 128)).unwrap();
        let back = relu_backward_q(&e, &mask).unwrap();
        assert_eq!(back.data(), &[128, 128, 128, 4]);
    }

    #[test]
    fn requant_floor_behaviour() {
        // floor semantics of the outer requantization, as in quantize()
        let out = qp(0.5, 10);
        assert_eq!(requant(0.99, out), 11);
        assert_eq!(requant(1.0, out), 12);
        assert_eq!(requant(-0.01, out), 9);
        assert_eq!(quantize(0.99, out), 11);
        let _ = dequantize(11, out);
    }
}
