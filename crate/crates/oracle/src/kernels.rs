//! Textbook float kernels over raw slices.
//!
//! Loop nests follow the engine's documented reduction orders (see the
//! comments on each function) so that float32 comparisons can demand
//! bitwise equality.

/// `y[o] = bias[o] + sum_j w[o][j] * x[j]`, summed in ascending `j`.
pub fn linear(x: &[f32], w: &[f32], bias: &[f32], out_f: usize, in_f: usize) -> Vec<f32> {
    assert_eq!(x.len(), in_f);
    assert_eq!(w.len(), out_f * in_f);
    assert_eq!(bias.len(), out_f);
    (0..out_f)
        .map(|o| {
            let mut acc = bias[o];
            for j in 0..in_f {
                acc += w[o * in_f + j] * x[j];
            }
            acc
        })
        .collect()
}

/// `e_in[j] = sum_o w[o][j] * e[o]`, summed in ascending `o`.
pub fn linear_err(e: &[f32], w: &[f32], out_f: usize, in_f: usize) -> Vec<f32> {
    assert_eq!(e.len(), out_f);
    let mut out = vec![0.0f32; in_f];
    for o in 0..out_f {
        for j in 0..in_f {
            out[j] += w[o * in_f + j] * e[o];
        }
    }
    out
}

/// Outer product `dw[o][j] = e[o] * x[j]`, plus `db[o] = e[o]`.
pub fn linear_weight_grad(e: &[f32], x: &[f32], out_f: usize, in_f: usize) -> (Vec<f32>, Vec<f32>) {
    let mut dw = vec![0.0f32; out_f * in_f];
    for o in 0..out_f {
        for j in 0..in_f {
            dw[o * in_f + j] = e[o] * x[j];
        }
    }
    (dw, e.to_vec())
}

/// Spatial geometry shared by the conv helpers.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Direct convolution, accumulated over `(c, ki, kj)` in that order with
/// out-of-bounds taps skipped.
pub fn conv2d(x: &[f32], w: &[f32], bias: &[f32], d: ConvDims) -> Vec<f32> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = Vec::with_capacity(d.out_c * oh * ow);
    for oc in 0..d.out_c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = bias[oc];
                for c in 0..d.in_c {
                    for ki in 0..d.k {
                        let ii = (oi * d.stride + ki) as isize - d.pad as isize;
                        if ii < 0 || ii >= d.in_h as isize {
                            continue;
                        }
                        for kj in 0..d.k {
                            let jj = (oj * d.stride + kj) as isize - d.pad as isize;
                            if jj < 0 || jj >= d.in_w as isize {
                                continue;
                            }
                            acc += w[((oc * d.in_c + c) * d.k + ki) * d.k + kj]
                                * x[(c * d.in_h + ii as usize) * d.in_w + jj as usize];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Transposed convolution of the error with the weights, scattered in
/// `(oc, oi, oj, c, ki, kj)` order — the engine's order.
pub fn conv2d_err(e: &[f32], w: &[f32], d: ConvDims) -> Vec<f32> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0f32; d.in_c * d.in_h * d.in_w];
    for oc in 0..d.out_c {
        for oi in 0..oh {
            for oj in 0..ow {
                let ei = e[(oc * oh + oi) * ow + oj];
                for c in 0..d.in_c {
                    for ki in 0..d.k {
                        let ii = (oi * d.stride + ki) as isize - d.pad as isize;
                        if ii < 0 || ii >= d.in_h as isize {
                            continue;
                        }
                        for kj in 0..d.k {
                            let jj = (oj * d.stride + kj) as isize - d.pad as isize;
                            if jj < 0 || jj >= d.in_w as isize {
                                continue;
                            }
                            out[(c * d.in_h + ii as usize) * d.in_w + jj as usize] +=
                                w[((oc * d.in_c + c) * d.k + ki) * d.k + kj] * ei;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of the cached input with the error, accumulated over
/// `(oi, oj)` per weight tap; bias gradient sums the error per channel.
pub fn conv2d_weight_grad(e: &[f32], x: &[f32], d: ConvDims) -> (Vec<f32>, Vec<f32>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut dw = vec![0.0f32; d.out_c * d.in_c * d.k * d.k];
    let mut db = vec![0.0f32; d.out_c];
    for oc in 0..d.out_c {
        for c in 0..d.in_c {
            for ki in 0..d.k {
                for kj in 0..d.k {
                    let mut acc = 0.0f32;
                    for oi in 0..oh {
                        let ii = (oi * d.stride + ki) as isize - d.pad as isize;
                        if ii < 0 || ii >= d.in_h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * d.stride + kj) as isize - d.pad as isize;
                            if jj < 0 || jj >= d.in_w as isize {
                                continue;
                            }
                            acc += e[(oc * oh + oi) * ow + oj]
                                * x[(c * d.in_h + ii as usize) * d.in_w + jj as usize];
                        }
                    }
                    dw[((oc * d.in_c + c) * d.k + ki) * d.k + kj] = acc;
                }
            }
        }
        let mut acc = 0.0f32;
        for oi in 0..oh {
            for oj in 0..ow {
                acc += e[(oc * oh + oi) * ow + oj];
            }
        }
        db[oc] = acc;
    }
    (dw, db)
}

/// Non-overlapping max pooling; ties to the lowest window index.
pub fn maxpool2d(x: &[f32], c: usize, h: usize, w: usize, size: usize) -> (Vec<f32>, Vec<usize>) {
    assert!(h % size == 0 && w % size == 0);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for wi in 0..size {
                    for wj in 0..size {
                        let v = x[(ch * h + oi * size + wi) * w + oj * size + wj];
                        if v > best {
                            best = v;
                            best_idx = wi * size + wj;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2d_err(
    e: &[f32],
    argmax: &[usize],
    c: usize,
    h: usize,
    w: usize,
    size: usize,
) -> Vec<f32> {
    let (oh, ow) = (h / size, w / size);
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let flat = (ch * oh + oi) * ow + oj;
                let idx = argmax[flat];
                out[(ch * h + oi * size + idx / size) * w + oj * size + idx % size] = e[flat];
            }
        }
    }
    out
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_err(e: &[f32], x_pre: &[f32]) -> Vec<f32> {
    e.iter()
        .zip(x_pre)
        .map(|(&ev, &xv)| if xv > 0.0 { ev } else { 0.0 })
        .collect()
}

/// Stabilized softmax cross-entropy with f64 accumulation, matching the
/// engine's numeric recipe.
pub fn softmax_xent(logits: &[f32], label: usize) -> (f32, Vec<f32>) {
    assert!(label < logits.len());
    let mut max = f32::NEG_INFINITY;
    for &v in logits {
        max = max.max(v);
    }
    let mut denom = 0.0f64;
    let exps: Vec<f64> = logits
        .iter()
        .map(|&v| {
            let e = libm::exp((v - max) as f64);
            denom += e;
            e
        })
        .collect();
    let grad: Vec<f32> = exps
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let p = e / denom;
            if i == label {
                (p - 1.0) as f32
            } else {
                p as f32
            }
        })
        .collect();
    let loss = (libm::log(denom) - (logits[label] - max) as f64) as f32;
    (loss, grad)
}

/// Requantization map of the engine: `floor(v / scale) + zero_point`,
/// saturated to `[0, 255]`.
pub fn requantize(v: f64, scale: f32, zero_point: u8) -> u8 {
    (libm::floor(v / scale as f64) + zero_point as f64) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_err_undoes_identity_kernel() {
        let d = ConvDims { in_c: 1, in_h: 2, in_w: 2, out_c: 1, k: 1, stride: 1, pad: 0 };
        let e = [1.0, -2.0, 3.0, -4.0];
        let back = conv2d_err(&e, &[1.0], d);
        assert_eq!(back, e);
    }

    #[test]
    fn weight_grad_single_window() {
        let d = ConvDims { in_c: 1, in_h: 2, in_w: 2, out_c: 1, k: 2, stride: 1, pad: 0 };
        let (dw, db) = conv2d_weight_grad(&[2.0], &[1.0, 2.0, 3.0, 4.0], d);
        assert_eq!(dw, vec![2.0, 4.0, 6.0, 8.0]);
        assert_eq!(db, vec![2.0]);
    }
}
