//! Non-overlapping max pooling.
//!
//! Forward records the winner's linear index inside each window (ties go to
//! the lowest index); backward routes each error element to its winner and
//! fills the rest with the error zero point. Pooling never requantizes:
//! outputs and routed errors keep the incoming qparams.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::qcore::{FTensor, QTensor};

fn pooled_dims(shape: &[usize], size: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("maxpool2d expects a 3D input, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::ShapeMismatch(format!(
            "maxpool2d size {size} does not divide input {h}x{w}"
        )));
    }
    Ok((c, h, w))
}

macro_rules! pool_forward {
    ($name:ident, $tensor:ty, $elem:ty, $rebuild:expr) => {
        pub fn $name(x: &$tensor, size: usize) -> Result<($tensor, Vec<u8>)> {
            let (c, h, w) = pooled_dims(x.shape(), size)?;
            let (oh, ow) = (h / size, w / size);
            let xd = x.data();
            let mut out: Vec<$elem> = Vec::with_capacity(c * oh * ow);
            let mut argmax = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best: $elem = xd[(ch * h + oi * size) * w + oj * size];
                        let mut best_idx = 0u8;
                        for wi in 0..size {
                            for wj in 0..size {
                                let v = xd[(ch * h + oi * size + wi) * w + oj * size + wj];
                                if v > best {
                                    best = v;
                                    best_idx = (wi * size + wj) as u8;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
            let shape = vec![c, oh, ow];
            Ok(($rebuild(shape, out, x), argmax))
        }
    };
}

pool_forward!(maxpool2d_forward_q, QTensor, u8, |shape, out, x: &QTensor| {
    QTensor::new(shape, out, x.qparams).expect("pooled shape consistent")
});
pool_forward!(maxpool2d_forward_f, FTensor, f32, |shape, out, _x: &FTensor| {
    FTensor::new(shape, out).expect("pooled shape consistent")
});

/// Routes quantized error to each window's recorded winner; every other
/// position receives the error zero point.
pub fn maxpool2d_backward_q(
    e_out: &QTensor,
    argmax: &[u8],
    in_shape: &[usize],
    size: usize,
) -> Result<QTensor> {
    let (c, h, w) = pooled_dims(in_shape, size)?;
    let (oh, ow) = (h / size, w / size);
    if e_out.shape() != [c, oh, ow] || argmax.len() != c * oh * ow {
        return Err(Error::ShapeMismatch("maxpool2d backward shape mismatch".to_string()));
    }
    let ze = e_out.qparams.zero_point;
    let mut data = vec![ze; c * h * w];
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let flat = (ch * oh + oi) * ow + oj;
                let idx = argmax[flat] as usize;
                let (wi, wj) = (idx / size, idx % size);
                data[(ch * h + oi * size + wi) * w + oj * size + wj] = e_out.data()[flat];
            }
        }
    }
    QTensor::new(vec![c, h, w], data, e_out.qparams)
}

/// Float analogue of [`maxpool2d_backward_q`]; non-winners receive 0.0.
pub fn maxpool2d_backward_f(
    e_out: &FTensor,
    argmax: &[u8],
    in_shape: &[usize],
    size: usize,
) -> Result<FTensor> {
    let (c, h, w) = pooled_dims(in_shape, size)?;
    let (oh, ow) = (h / size, w / size);
    if e_out.shape() != [c, oh, ow] || argmax.len() != c * oh * ow {
        return Err(Error::ShapeMismatch("maxpool2d backward shape mismatch".to_string()));
    }
    let mut data = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let flat = (ch * oh + oi) * ow + oj;
                let idx = argmax[flat] as usize;
                let (wi, wj) = (idx / size, idx % size);
                data[(ch * h + oi * size + wi) * w + oj * size + wj] = e_out.data()[flat];
            }
        }
    }
    FTensor::new(vec![c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{quantize_tensor, QuantParams};

    #[test]
    fn picks_window_max_and_index() {
        let x = quantize_tensor(&FTensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let (y, idx) = maxpool2d_forward_q(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert!((y.dequant_at(0) - 4.0).abs() <= y.qparams.scale + 1e-6);
        assert_eq!(idx, [3]);
    }

    #[test]
    fn backward_routes_to_winner() {
        let e = quantize_tensor(&FTensor::new(vec![1, 1, 1], vec![5.0]).unwrap()).unwrap();
        let back = maxpool2d_backward_q(&e, &[3], &[1, 2, 2], 2).unwrap();
        let z = e.qparams.zero_point;
        assert_eq!(back.data()[0], z);
        assert_eq!(back.data()[1], z);
        assert_eq!(back.data()[2], z);
        assert!((back.dequant_at(3) - 5.0).abs() <= e.qparams.scale + 1e-6);
    }

    #[test]
    fn ties_break_to_lowest_linear_index() {
        // exhaustive over all positions of the (single) max in a 2x2 window
        for max_pos in 0..4usize {
            let mut vals = vec![7u8; 4];
            vals[max_pos] = 9;
            let x = QTensor::new(vec![1, 2, 2], vals, QuantParams { scale: 0.1, zero_point: 0 })
                .unwrap();
            let (_, idx) = maxpool2d_forward_q(&x, 2).unwrap();
            assert_eq!(idx, [max_pos as u8]);
        }
        // all equal: index 0 wins
        let x = QTensor::new(vec![1, 2, 2], vec![7; 4], QuantParams { scale: 0.1, zero_point: 0 })
            .unwrap();
        let (_, idx) = maxpool2d_forward_q(&x, 2).unwrap();
        assert_eq!(idx, [0]);
    }

    #[test]
    fn error_mass_is_conserved_per_window() {
        let x = FTensor::new(vec![2, 4, 4], (0..32).map(|i| (i as f32 * 37.0) % 11.0).collect())
            .unwrap();
        let (_, argmax) = maxpool2d_forward_f(&x, 2).unwrap();
        let e = FTensor::new(vec![2, 2, 2], (0..8).map(|i| i as f32 - 3.5).collect()).unwrap();
        let back = maxpool2d_backward_f(&e, &argmax, &[2, 4, 4], 2).unwrap();
        let sum_out: f32 = e.data().iter().sum();
        let sum_in: f32 = back.data().iter().sum();
        assert!((sum_out - sum_in).abs() < 1e-6);
    }

    #[test]
    fn non_dividing_geometry_rejected() {
        let x = FTensor::zeros(vec![1, 3, 3]).unwrap();
        assert!(maxpool2d_forward_f(&x, 2).is_err());
    }
}
