//! Whole-model float reference: naive forward and explicit chain-rule
//! backward over a mirror of a sequential engine model.

use std::collections::BTreeMap;

use qtrain_core::graph::Model;
use qtrain_core::layers::LayerSpec;

use crate::kernels;

/// Float mirror of one engine layer.
#[derive(Debug, Clone)]
pub enum OracleLayer {
    Conv {
        dims: kernels::ConvDims,
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    Linear {
        in_f: usize,
        out_f: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    MaxPool {
        size: usize,
    },
    ReLU,
    Flatten,
}

/// Gradients per weighted layer index.
pub type OracleGrads = BTreeMap<usize, (Vec<f32>, Vec<f32>)>;

/// All-float mirror of a sequential model.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub input_shape: Vec<usize>,
    pub layers: Vec<OracleLayer>,
}

impl OracleModel {
    /// Mirrors a float32-precision engine model. A trailing softmax layer
    /// is dropped (the loss handles it); quantized layers are rejected.
    pub fn from_float_model(model: &Model) -> Result<Self, String> {
        let mut layers = Vec::new();
        for layer in model.layers() {
            match layer {
                LayerSpec::Conv2d { geom, weight, bias } => layers.push(OracleLayer::Conv {
                    dims: kernels::ConvDims {
                        in_c: geom.in_channels,
                        in_h: geom.in_h,
                        in_w: geom.in_w,
                        out_c: geom.out_channels,
                        k: geom.kernel,
                        stride: geom.stride,
                        pad: geom.padding,
                    },
                    weight: weight.data().to_vec(),
                    bias: bias.clone(),
                }),
                LayerSpec::Linear { geom, weight, bias } => layers.push(OracleLayer::Linear {
                    in_f: geom.in_features,
                    out_f: geom.out_features,
                    weight: weight.data().to_vec(),
                    bias: bias.clone(),
                }),
                LayerSpec::MaxPool2d { size } => layers.push(OracleLayer::MaxPool { size: *size }),
                LayerSpec::ReLU => layers.push(OracleLayer::ReLU),
                LayerSpec::Flatten => layers.push(OracleLayer::Flatten),
                LayerSpec::SoftmaxXEnt => {}
                other => {
                    return Err(format!(
                        "oracle mirrors float models only; found {}",
                        other.kind()
                    ))
                }
            }
        }
        Ok(Self {
            input_shape: model.input_shape().to_vec(),
            layers,
        })
    }

    /// Plain forward pass; returns the logits.
    pub fn forward(&self, input: &[f32]) -> Vec<f32> {
        self.run_forward(input).0
    }

    /// Forward with per-layer caches for the backward.
    #[allow(clippy::type_complexity)]
    fn run_forward(&self, input: &[f32]) -> (Vec<f32>, Vec<Cache>) {
        let mut value = input.to_vec();
        let mut shape = self.input_shape.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                OracleLayer::Conv { dims, weight, bias } => {
                    let y = kernels::conv2d(&value, weight, bias, *dims);
                    caches.push(Cache::Input(value));
                    value = y;
                    shape = vec![dims.out_c, dims.out_h(), dims.out_w()];
                }
                OracleLayer::Linear { in_f, out_f, weight, bias } => {
                    let y = kernels::linear(&value, weight, bias, *out_f, *in_f);
                    caches.push(Cache::Input(value));
                    value = y;
                    shape = vec![*out_f];
                }
                OracleLayer::MaxPool { size } => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (y, arg) = kernels::maxpool2d(&value, c, h, w, *size);
                    caches.push(Cache::Pool { argmax: arg, shape: (c, h, w) });
                    value = y;
                    shape = vec![c, h / size, w / size];
                }
                OracleLayer::ReLU => {
                    let pre = value.clone();
                    value = kernels::relu(&value);
                    caches.push(Cache::Pre(pre));
                }
                OracleLayer::Flatten => {
                    caches.push(Cache::None);
                    shape = vec![value.len()];
                }
            }
        }
        (value, caches)
    }

    /// Loss, logit gradient, and per-weighted-layer gradients by explicit
    /// chain rule.
    pub fn loss_and_grads(&self, input: &[f32], label: usize) -> (f32, OracleGrads) {
        let (logits, caches) = self.run_forward(input);
        let (loss, d_logits) = kernels::softmax_xent(&logits, label);
        let mut grads: OracleGrads = BTreeMap::new();
        let mut e = d_logits;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            match (layer, &caches[idx]) {
                (OracleLayer::Conv { dims, weight, .. }, Cache::Input(x)) => {
                    let (dw, db) = kernels::conv2d_weight_grad(&e, x, *dims);
                    grads.insert(idx, (dw, db));
                    e = kernels::conv2d_err(&e, weight, *dims);
                }
                (OracleLayer::Linear { in_f, out_f, weight, .. }, Cache::Input(x)) => {
                    let (dw, db) = kernels::linear_weight_grad(&e, x, *out_f, *in_f);
                    grads.insert(idx, (dw, db));
                    e = kernels::linear_err(&e, weight, *out_f, *in_f);
                }
                (OracleLayer::MaxPool { size }, Cache::Pool { argmax, shape }) => {
                    e = kernels::maxpool2d_err(&e, argmax, shape.0, shape.1, shape.2, *size);
                }
                (OracleLayer::ReLU, Cache::Pre(pre)) => {
                    e = kernels::relu_err(&e, pre);
                }
                (OracleLayer::Flatten, Cache::None) => {}
                _ => unreachable!("cache kind matches layer kind"),
            }
        }
        (loss, grads)
    }
}

enum Cache {
    Input(Vec<f32>),
    Pool { argmax: Vec<usize>, shape: (usize, usize, usize) },
    Pre(Vec<f32>),
    None,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_single_layer_matches_closed_form_loss() {
        let model = OracleModel {
            input_shape: vec![2],
            layers: vec![OracleLayer::Linear {
                in_f: 2,
                out_f: 2,
                weight: vec![1.0, 0.0, 0.0, 1.0],
                bias: vec![0.0, 0.0],
            }],
        };
        let (loss, _) = model.loss_and_grads(&[0.0, 0.0], 0);
        assert!((loss - (2.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = OracleModel {
            input_shape: vec![3],
            layers: vec![
                OracleLayer::Linear {
                    in_f: 3,
                    out_f: 4,
                    weight: vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4, 0.2, 0.1, -0.3, 0.6, -0.1, 0.05],
                    bias: vec![0.01, -0.02, 0.0, 0.03],
                },
                OracleLayer::ReLU,
                OracleLayer::Linear {
                    in_f: 4,
                    out_f: 3,
                    weight: vec![0.2; 12],
                    bias: vec![0.0; 3],
                },
            ],
        };
        let input = [0.5, -1.0, 0.25];
        let (_, grads) = model.loss_and_grads(&input, 1);
        let analytic = grads[&0].0.clone();

        let base = match &model.layers[0] {
            OracleLayer::Linear { weight, .. } => weight.clone(),
            _ => unreachable!(),
        };
        let mut params = base.clone();
        let numeric = crate::finite_diff(
            |p| {
                if let OracleLayer::Linear { weight, .. } = &mut model.layers[0] {
                    weight.copy_from_slice(p);
                }
                model.loss_and_grads(&input, 1).0
            },
            &mut params,
            1e-3,
        );
        if let OracleLayer::Linear { weight, .. } = &mut model.layers[0] {
            weight.copy_from_slice(&base);
        }
        assert!(crate::max_relative_error(&numeric, &analytic) < 1e-3);
    }
}
