//! Floating-point kernels and the precision boundary.
//!
//! These mirror the quantized kernels one to one and run in float32 with a
//! fixed reduction order, so float-mode training is bit-reproducible.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::ConvGeometry;
use crate::qcore::{dequantize_tensor, quantize_tensor, FTensor, QTensor};

/// Result of a float backward kernel; field presence mirrors
/// [`super::QuantBackward`].
#[derive(Debug, Clone)]
pub struct FloatBackward {
    pub d_input: Option<FTensor>,
    pub d_weight: Option<FTensor>,
    pub d_bias: Option<Vec<f32>>,
}

/// `y = W x + bias` for a rank-1 input.
pub fn linear_forward(x: &FTensor, w: &FTensor, bias: &[f32]) -> Result<FTensor> {
    let ws = w.shape();
    if ws.len() != 2 {
        return Err(Error::ShapeMismatch("linear weight must be rank 2".to_string()));
    }
    let (out_f, in_f) = (ws[0], ws[1]);
    if x.shape() != [in_f] {
        return Err(Error::ShapeMismatch(format!(
            "linear expects input [{in_f}], got {:?}",
            x.shape()
        )));
    }
    if bias.len() != out_f {
        return Err(Error::ShapeMismatch("linear bias length mismatch".to_string()));
    }
    let wd = w.data();
    let xd = x.data();
    let mut out = Vec::with_capacity(out_f);
    for o in 0..out_f {
        let mut acc = bias[o];
        for (&wv, &xv) in wd[o * in_f..(o + 1) * in_f].iter().zip(xd) {
            acc += wv * xv;
        }
        out.push(acc);
    }
    FTensor::new(vec![out_f], out)
}

/// Backward of [`linear_forward`]; see the quantized counterpart for the
/// meaning of `selected`.
pub fn linear_backward(
    e_out: &FTensor,
    x_cached: Option<&FTensor>,
    w: &FTensor,
    compute_d_input: bool,
    selected: Option<&[usize]>,
) -> Result<FloatBackward> {
    let ws = w.shape();
    if ws.len() != 2 {
        return Err(Error::ShapeMismatch("linear weight must be rank 2".to_string()));
    }
    let (out_f, in_f) = (ws[0], ws[1]);
    if e_out.shape() != [out_f] {
        return Err(Error::ShapeMismatch("linear backward error shape mismatch".to_string()));
    }
    if let Some(x) = x_cached {
        if x.shape() != [in_f] {
            return Err(Error::ShapeMismatch("linear cached input shape mismatch".to_string()));
        }
    }
    let rows: Vec<usize> = match selected {
        Some(s) => s.to_vec(),
        None => (0..out_f).collect(),
    };
    for &o in &rows {
        if o >= out_f {
            return Err(Error::InvalidArgument(format!("selected row {o} out of range {out_f}")));
        }
    }
    let ed = e_out.data();
    let wd = w.data();

    let d_input = if compute_d_input {
        let mut acc = vec![0.0f32; in_f];
        for &o in &rows {
            let ei = ed[o];
            for (a, &wv) in acc.iter_mut().zip(&wd[o * in_f..(o + 1) * in_f]) {
                *a += wv * ei;
            }
        }
        Some(FTensor::new(vec![in_f], acc)?)
    } else {
        None
    };

    let (d_weight, d_bias) = match x_cached {
        Some(x) => {
            let xd = x.data();
            let mut dw = vec![0.0f32; out_f * in_f];
            let mut db = vec![0.0f32; out_f];
            for &o in &rows {
                let ei = ed[o];
                db[o] = ei;
                for (d, &xv) in dw[o * in_f..(o + 1) * in_f].iter_mut().zip(xd) {
                    *d = ei * xv;
                }
            }
            (Some(FTensor::new(vec![out_f, in_f], dw)?), Some(db))
        }
        None => (None, None),
    };

    Ok(FloatBackward { d_input, d_weight, d_bias })
}

/// Float 2D convolution. Padding contributes zeros.
pub fn conv2d_forward(
    x: &FTensor,
    w: &FTensor,
    bias: &[f32],
    geom: &ConvGeometry,
) -> Result<FTensor> {
    if x.shape() != [geom.in_channels, geom.in_h, geom.in_w] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects input {:?}, got {:?}",
            [geom.in_channels, geom.in_h, geom.in_w],
            x.shape()
        )));
    }
    if w.shape() != geom.weight_shape().as_slice() {
        return Err(Error::ShapeMismatch("conv2d weight/geometry mismatch".to_string()));
    }
    if bias.len() != geom.out_channels {
        return Err(Error::ShapeMismatch("conv2d bias length mismatch".to_string()));
    }
    let (c_in, h, w_in) = (geom.in_channels, geom.in_h, geom.in_w);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let k = geom.kernel;
    let xd = x.data();
    let wd = w.data();

    let mut out = Vec::with_capacity(geom.out_channels * oh * ow);
    for oc in 0..geom.out_channels {
        let w_oc = &wd[oc * c_in * k * k..(oc + 1) * c_in * k * k];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = bias[oc];
                for c in 0..c_in {
                    for ki in 0..k {
                        let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * geom.stride + kj) as isize - geom.padding as isize;
                            if jj < 0 || jj >= w_in as isize {
                                continue;
                            }
                            acc += w_oc[(c * k + ki) * k + kj]
                                * xd[(c * h + ii as usize) * w_in + jj as usize];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    FTensor::new(vec![geom.out_channels, oh, ow], out)
}

/// Backward of [`conv2d_forward`].
pub fn conv2d_backward(
    e_out: &FTensor,
    x_cached: Option<&FTensor>,
    w: &FTensor,
    geom: &ConvGeometry,
    compute_d_input: bool,
    selected: Option<&[usize]>,
) -> Result<FloatBackward> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    if e_out.shape() != [geom.out_channels, oh, ow] {
        return Err(Error::ShapeMismatch("conv2d backward error shape mismatch".to_string()));
    }
    if w.shape() != geom.weight_shape().as_slice() {
        return Err(Error::ShapeMismatch("conv2d weight/geometry mismatch".to_string()));
    }
    if let Some(x) = x_cached {
        if x.shape() != [geom.in_channels, geom.in_h, geom.in_w] {
            return Err(Error::ShapeMismatch("conv2d cached input shape mismatch".to_string()));
        }
    }
    let (c_in, h, w_in) = (geom.in_channels, geom.in_h, geom.in_w);
    let k = geom.kernel;
    let ed = e_out.data();
    let wd = w.data();
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

    let d_input = if compute_d_input {
        let mut acc = vec![0.0f32; c_in * h * w_in];
        for &oc in &channels {
            let w_oc = &wd[oc * c_in * k * k..(oc + 1) * c_in * k * k];
            for oi in 0..oh {
                for oj in 0..ow {
                    let ei = ed[(oc * oh + oi) * ow + oj];
                    for c in 0..c_in {
                        for ki in 0..k {
                            let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let jj = (oj * geom.stride + kj) as isize - geom.padding as isize;
                                if jj < 0 || jj >= w_in as isize {
                                    continue;
                                }
                                acc[(c * h + ii as usize) * w_in + jj as usize] +=
                                    w_oc[(c * k + ki) * k + kj] * ei;
                            }
                        }
                    }
                }
            }
        }
        Some(FTensor::new(vec![c_in, h, w_in], acc)?)
    } else {
        None
    };

    let (d_weight, d_bias) = match x_cached {
        Some(x) => {
            let xd = x.data();
            let mut dw = vec![0.0f32; geom.weight_len()];
            let mut db = vec![0.0f32; geom.out_channels];
            for &oc in &channels {
                for c in 0..c_in {
                    for ki in 0..k {
                        for kj in 0..k {
                            let mut acc = 0.0f32;
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
                                    acc += ed[(oc * oh + oi) * ow + oj]
                                        * xd[(c * h + ii as usize) * w_in + jj as usize];
                                }
                            }
                            dw[((oc * c_in + c) * k + ki) * k + kj] = acc;
                        }
                    }
                }
                let mut bias_acc = 0.0f32;
                for oi in 0..oh {
                    for oj in 0..ow {
                        bias_acc += ed[(oc * oh + oi) * ow + oj];
                    }
                }
                db[oc] = bias_acc;
            }
            (Some(FTensor::new(geom.weight_shape(), dw)?), Some(db))
        }
        None => (None, None),
    };

    Ok(FloatBackward { d_input, d_weight, d_bias })
}

/// Float ReLU with pass mask.
pub fn relu_forward_f(x: &FTensor) -> (FTensor, Vec<bool>) {
    let data: Vec<f32> = x.data().iter().map(|&v| v.max(0.0)).collect();
    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    let out = FTensor::new(x.shape().to_vec(), data).expect("shape preserved");
    (out, mask)
}

pub fn relu_backward_f(e_out: &FTensor, mask: &[bool]) -> Result<FTensor> {
    if e_out.len() != mask.len() {
        return Err(Error::ShapeMismatch("relu mask length mismatch".to_string()));
    }
    let data: Vec<f32> = e_out
        .data()
        .iter()
        .zip(mask)
        .map(|(&e, &m)| if m { e } else { 0.0 })
        .collect();
    FTensor::new(e_out.shape().to_vec(), data)
}

/// Precision boundary, forward direction: dequantize into float.
pub fn dequant_boundary(x: &QTensor) -> FTensor {
    dequantize_tensor(x)
}

/// Precision boundary, backward direction: the incoming float error is
/// quantized with freshly derived qparams from its own range.
pub fn dequant_boundary_backward(e: &FTensor) -> Result<QTensor> {
    quantize_tensor(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_is_exact() {
        let w = FTensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = FTensor::new(vec![2], vec![0.37, -2.5]).unwrap();
        let y = linear_forward(&x, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_backward_shapes_and_values() {
        let w = FTensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = FTensor::new(vec![3], vec![1.0, 0.0, -1.0]).unwrap();
        let e = FTensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = linear_backward(&e, Some(&x), &w, true, None).unwrap();
        assert_eq!(g.d_input.unwrap().data(), &[-3.0, -3.0, -3.0]);
        assert_eq!(
            g.d_weight.unwrap().data(),
            &[1.0, 0.0, -1.0, -1.0, 0.0, 1.0]
        );
        assert_eq!(g.d_bias.unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn conv_valid_window_sum() {
        let geom = ConvGeometry {
            in_channels: 1,
            in_h: 3,
            in_w: 3,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 0,
        };
        let w = FTensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let x = FTensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d_forward(&x, &w, &[0.0], &geom).unwrap();
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_padding_contributes_zero() {
        let geom = ConvGeometry {
            in_channels: 1,
            in_h: 2,
            in_w: 2,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let w = FTensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let x = FTensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv2d_forward(&x, &w, &[0.0], &geom).unwrap();
        // every output sums the in-bounds part of its window
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn relu_masks_negative_positions() {
        let x = FTensor::new(vec![4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let (y, mask) = relu_forward_f(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        assert_eq!(mask, [false, false, true, true]);
        let e = FTensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let back = relu_backward_f(&e, &mask).unwrap();
        assert_eq!(back.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn dequant_boundary_round_trip_bounded_by_scale() {
        let f = FTensor::new(vec![4], vec![-1.0, -0.25, 0.5, 1.5]).unwrap();
        let q = dequant_boundary_backward(&f).unwrap();
        let back = dequant_boundary(&q);
        for (a, b) in f.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= q.qparams.scale + 1e-6);
        }
    }
}
