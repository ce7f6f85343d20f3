//! Layer definitions and forward/backward kernels.
//!
//! Every layer type the engine supports exists in a quantized and a
//! floating variant. Quantized kernels take 8-bit tensors, accumulate dot
//! products in `i32`, and requantize results on write-out with a floor;
//! weight gradients are the exception and always leave the kernel in
//! float, since the optimizer consumes them unquantized.

mod float;
mod loss;
mod pool;
mod quantized;

pub use float::{
    conv2d_backward, conv2d_forward, dequant_boundary, dequant_boundary_backward, linear_backward,
    linear_forward, relu_backward_f, relu_forward_f, FloatBackward,
};
pub use loss::softmax_xent;
pub use pool::{maxpool2d_backward_f, maxpool2d_backward_q, maxpool2d_forward_f, maxpool2d_forward_q};
pub use quantized::{
    qconv2d_backward, qconv2d_forward, qlinear_backward, qlinear_forward, relu_backward_q,
    relu_forward_q, QuantBackward,
};

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::qcore::{quantize_tensor, FTensor, QTensor, Value};

/// Observed float range of a kernel's pre-quantization results. Feeds the
/// moving-average calibration of activation and error quantization
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRange {
    pub min: f32,
    pub max: f32,
}

impl ValueRange {
    pub const EMPTY: ValueRange = ValueRange {
        min: f32::INFINITY,
        max: f32::NEG_INFINITY,
    };

    pub fn observe(&mut self, v: f32) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    pub fn merge(&mut self, other: ValueRange) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

/// Geometry of a 2D convolution. Kernels, strides, and padding are square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel == 0
            || self.stride == 0
            || self.in_h == 0
            || self.in_w == 0
        {
            return Err(Error::InvalidModel("conv geometry dimensions must be positive".to_string()));
        }
        if self.padding >= self.kernel {
            return Err(Error::InvalidModel(format!(
                "conv padding {} must be smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        if self.in_h + 2 * self.padding < self.kernel || self.in_w + 2 * self.padding < self.kernel {
            return Err(Error::InvalidModel("conv kernel larger than padded input".to_string()));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        alloc::vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// Geometry of a fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearGeometry {
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.in_features == 0 || self.out_features == 0 {
            return Err(Error::InvalidModel("linear geometry dimensions must be positive".to_string()));
        }
        Ok(())
    }
}

/// Discriminant of a layer, used in error messages and the checkpoint wire
/// format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    QConv2d,
    QLinear,
    Conv2d,
    Linear,
    MaxPool2d,
    ReLU,
    Flatten,
    Dequant,
    SoftmaxXEnt,
}

impl core::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let name = match self {
            LayerKind::QConv2d => "qconv2d",
            LayerKind::QLinear => "qlinear",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Linear => "linear",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::ReLU => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::Dequant => "dequant",
            LayerKind::SoftmaxXEnt => "softmax_xent",
        };
        f.write_str(name)
    }
}

/// One layer of a sequential model, carrying its weights where applicable.
///
/// `QConv2d` is the folded form of conv + batchnorm + ReLU: the engine
/// accepts only pre-folded weights, and the `relu` flag fuses the
/// activation (outputs clamped at the zero point from below). Linear
/// layers pair with a standalone [`LayerSpec::ReLU`] instead.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    QConv2d {
        geom: ConvGeometry,
        relu: bool,
        weight: QTensor,
        bias: Vec<i32>,
    },
    QLinear {
        geom: LinearGeometry,
        weight: QTensor,
        bias: Vec<i32>,
    },
    Conv2d {
        geom: ConvGeometry,
        weight: FTensor,
        bias: Vec<f32>,
    },
    Linear {
        geom: LinearGeometry,
        weight: FTensor,
        bias: Vec<f32>,
    },
    MaxPool2d {
        size: usize,
    },
    ReLU,
    Flatten,
    Dequant,
    SoftmaxXEnt,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::QConv2d { .. } => LayerKind::QConv2d,
            LayerSpec::QLinear { .. } => LayerKind::QLinear,
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::Linear { .. } => LayerKind::Linear,
            LayerSpec::MaxPool2d { .. } => LayerKind::MaxPool2d,
            LayerSpec::ReLU => LayerKind::ReLU,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Dequant => LayerKind::Dequant,
            LayerSpec::SoftmaxXEnt => LayerKind::SoftmaxXEnt,
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerSpec::QConv2d { .. }
                | LayerSpec::QLinear { .. }
                | LayerSpec::Conv2d { .. }
                | LayerSpec::Linear { .. }
        )
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, LayerSpec::QConv2d { .. } | LayerSpec::QLinear { .. })
    }

    /// Number of output structures for sparse selection (conv channels or
    /// linear rows). None for weightless layers.
    pub fn structure_count(&self) -> Option<usize> {
        match self {
            LayerSpec::QConv2d { geom, .. } | LayerSpec::Conv2d { geom, .. } => Some(geom.out_channels),
            LayerSpec::QLinear { geom, .. } | LayerSpec::Linear { geom, .. } => Some(geom.out_features),
            _ => None,
        }
    }

    /// Validates weight/bias payloads against the declared geometry.
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::QConv2d { geom, weight, bias, .. } => {
                geom.validate()?;
                if weight.shape() != geom.weight_shape().as_slice() {
                    return Err(Error::ShapeMismatch(format!(
                        "qconv2d weight shape {:?} does not match geometry {:?}",
                        weight.shape(),
                        geom.weight_shape()
                    )));
                }
                if bias.len() != geom.out_channels {
                    return Err(Error::ShapeMismatch("qconv2d bias length mismatch".to_string()));
                }
                Ok(())
            }
            LayerSpec::Conv2d { geom, weight, bias } => {
                geom.validate()?;
                if weight.shape() != geom.weight_shape().as_slice() {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d weight shape {:?} does not match geometry {:?}",
                        weight.shape(),
                        geom.weight_shape()
                    )));
                }
                if bias.len() != geom.out_channels {
                    return Err(Error::ShapeMismatch("conv2d bias length mismatch".to_string()));
                }
                Ok(())
            }
            LayerSpec::QLinear { geom, weight, bias } => {
                geom.validate()?;
                if weight.shape() != [geom.out_features, geom.in_features] {
                    return Err(Error::ShapeMismatch(format!(
                        "qlinear weight shape {:?} does not match geometry {}x{}",
                        weight.shape(),
                        geom.out_features,
                        geom.in_features
                    )));
                }
                if bias.len() != geom.out_features {
                    return Err(Error::ShapeMismatch("qlinear bias length mismatch".to_string()));
                }
                Ok(())
            }
            LayerSpec::Linear { geom, weight, bias } => {
                geom.validate()?;
                if weight.shape() != [geom.out_features, geom.in_features] {
                    return Err(Error::ShapeMismatch(format!(
                        "linear weight shape {:?} does not match geometry {}x{}",
                        weight.shape(),
                        geom.out_features,
                        geom.in_features
                    )));
                }
                if bias.len() != geom.out_features {
                    return Err(Error::ShapeMismatch("linear bias length mismatch".to_string()));
                }
                Ok(())
            }
            LayerSpec::MaxPool2d { size } => {
                if *size == 0 {
                    return Err(Error::InvalidModel("pool size must be positive".to_string()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Static shape inference: output shape for a given input shape.
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |detail: alloc::string::String| Err(Error::ShapeMismatch(detail));
        match self {
            LayerSpec::QConv2d { geom, .. } | LayerSpec::Conv2d { geom, .. } => {
                if in_shape != [geom.in_channels, geom.in_h, geom.in_w] {
                    return mismatch(format!(
                        "{} expects input {:?}, got {:?}",
                        self.kind(),
                        [geom.in_channels, geom.in_h, geom.in_w],
                        in_shape
                    ));
                }
                Ok(alloc::vec![geom.out_channels, geom.out_h(), geom.out_w()])
            }
            LayerSpec::QLinear { geom, .. } | LayerSpec::Linear { geom, .. } => {
                if in_shape != [geom.in_features] {
                    return mismatch(format!(
                        "{} expects input [{}], got {:?}",
                        self.kind(),
                        geom.in_features,
                        in_shape
                    ));
                }
                Ok(alloc::vec![geom.out_features])
            }
            LayerSpec::MaxPool2d { size } => {
                if in_shape.len() != 3 {
                    return mismatch(format!("maxpool2d expects a 3D input, got {in_shape:?}"));
                }
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                if h % size != 0 || w % size != 0 {
                    return mismatch(format!(
                        "maxpool2d size {size} does not divide input {h}x{w}"
                    ));
                }
                Ok(alloc::vec![c, h / size, w / size])
            }
            LayerSpec::Flatten => {
                let n: usize = in_shape.iter().product();
                Ok(alloc::vec![n])
            }
            LayerSpec::ReLU | LayerSpec::Dequant | LayerSpec::SoftmaxXEnt => Ok(in_shape.to_vec()),
        }
    }
}

/// Gradients a layer's backward produces. `d_input` carries the error for
/// the next-earlier layer; it is absent for the earliest visited layer.
/// `d_weight` is always float: the optimizer consumes it before any
/// requantization happens.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub d_input: Option<Value>,
    pub d_weight: Option<FTensor>,
    pub d_bias: Option<Vec<f32>>,
}

/// Uniform init in `[-r, r]` with `r = sqrt(1 / fan_in)`.
fn init_uniform<R: Rng>(len: usize, fan_in: usize, rng: &mut R) -> Vec<f32> {
    let r = libm::sqrtf(1.0 / fan_in as f32);
    (0..len).map(|_| rng.gen_range(-r..=r)).collect()
}

pub fn init_qconv2d<R: Rng>(geom: ConvGeometry, relu: bool, rng: &mut R) -> Result<LayerSpec> {
    geom.validate()?;
    let fan_in = geom.in_channels * geom.kernel * geom.kernel;
    let floats = FTensor::new(geom.weight_shape(), init_uniform(geom.weight_len(), fan_in, rng))?;
    Ok(LayerSpec::QConv2d {
        geom,
        relu,
        weight: quantize_tensor(&floats)?,
        bias: alloc::vec![0; geom.out_channels],
    })
}

pub fn init_qlinear<R: Rng>(geom: LinearGeometry, rng: &mut R) -> Result<LayerSpec> {
    geom.validate()?;
    let len = geom.in_features * geom.out_features;
    let floats = FTensor::new(
        alloc::vec![geom.out_features, geom.in_features],
        init_uniform(len, geom.in_features, rng),
    )?;
    Ok(LayerSpec::QLinear {
        geom,
        weight: quantize_tensor(&floats)?,
        bias: alloc::vec![0; geom.out_features],
    })
}

pub fn init_conv2d<R: Rng>(geom: ConvGeometry, rng: &mut R) -> Result<LayerSpec> {
    geom.validate()?;
    let fan_in = geom.in_channels * geom.kernel * geom.kernel;
    let weight = FTensor::new(geom.weight_shape(), init_uniform(geom.weight_len(), fan_in, rng))?;
    Ok(LayerSpec::Conv2d {
        geom,
        weight,
        bias: alloc::vec![0.0; geom.out_channels],
    })
}

pub fn init_linear<R: Rng>(geom: LinearGeometry, rng: &mut R) -> Result<LayerSpec> {
    geom.validate()?;
    let len = geom.in_features * geom.out_features;
    let weight = FTensor::new(
        alloc::vec![geom.out_features, geom.in_features],
        init_uniform(len, geom.in_features, rng),
    )?;
    Ok(LayerSpec::Linear {
        geom,
        weight,
        bias: alloc::vec![0.0; geom.out_features],
    })
}
