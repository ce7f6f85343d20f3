//! The single-sample training loop.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{
    backward, backward_with, forward_macs, forward_train, input_scale, CalibState, Model,
    StructureSelector,
};
use crate::layers::softmax_xent;
use crate::optim::{
    apply_update, select_structures, update_count, GradientBuffer, SparseConfig, SparseState,
};
use crate::qcore::{QTensor, Value};

/// Hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: u32,
    pub sparse: Option<SparseConfig>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be positive".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".to_string()));
        }
        if let Some(sparse) = &self.sparse {
            sparse.validate()?;
        }
        Ok(())
    }
}

/// What one training step produced.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub loss: f32,
    /// Multiply-accumulates of this step's forward pass.
    pub macs_forward: u64,
    /// Multiply-accumulates this step's backward actually executed.
    pub macs_backward: u64,
    /// `(layer, selected, total)` per weighted layer the backward visited.
    pub selection: Vec<(usize, usize, usize)>,
    /// Mean of `selected/total`; 1.0 when running dense.
    pub selected_fraction_mean: f32,
    /// True when this step completed a minibatch and applied updates.
    pub applied_update: bool,
}

struct LossAdaptiveSelector {
    lambda_min: f32,
    lambda_max: f32,
    ratio: f32,
}

impl StructureSelector for LossAdaptiveSelector {
    fn select(&mut self, _layer: usize, e_out: &Value, structures: usize) -> Option<Vec<usize>> {
        let k = update_count(self.lambda_min, self.lambda_max, self.ratio, structures);
        if k >= structures {
            None
        } else {
            Some(select_structures(e_out, k))
        }
    }
}

/// Owns a model plus all mutable training state: calibration, gradient
/// buffers, the sparse schedule, and counters. Single-writer by
/// construction.
pub struct Trainer {
    model: Model,
    calib: CalibState,
    config: TrainConfig,
    buffers: BTreeMap<usize, GradientBuffer>,
    sparse: Option<SparseState>,
    steps: u64,
    macs_forward_total: u64,
    macs_backward_total: u64,
    backward_visits: Vec<u64>,
    forward_macs_per_step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, calib: CalibState) -> Result<Self> {
        config.validate()?;
        let mut buffers = BTreeMap::new();
        for &idx in model.trainable() {
            let (weight_shape, bias_len) = match model.layer(idx) {
                crate::layers::LayerSpec::QConv2d { geom, weight, .. } => {
                    (weight.shape().to_vec(), geom.out_channels)
                }
                crate::layers::LayerSpec::Conv2d { geom, weight, .. } => {
                    (weight.shape().to_vec(), geom.out_channels)
                }
                crate::layers::LayerSpec::QLinear { geom, weight, .. } => {
                    (weight.shape().to_vec(), geom.out_features)
                }
                crate::layers::LayerSpec::Linear { geom, weight, .. } => {
                    (weight.shape().to_vec(), geom.out_features)
                }
                _ => continue,
            };
            buffers.insert(idx, GradientBuffer::new(&weight_shape, bias_len)?);
        }
        let sparse = match &config.sparse {
            Some(cfg) => Some(SparseState::new(*cfg)?),
            None => None,
        };
        let forward_macs_per_step = forward_macs(&model);
        let backward_visits = alloc::vec![0; model.layers().len()];
        Ok(Self {
            model,
            calib,
            config,
            buffers,
            sparse,
            steps: 0,
            macs_forward_total: 0,
            macs_backward_total: 0,
            backward_visits,
            forward_macs_per_step,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn calib(&self) -> &CalibState {
        &self.calib
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Cumulative (forward, backward) multiply-accumulates.
    pub fn total_macs(&self) -> (u64, u64) {
        (self.macs_forward_total, self.macs_backward_total)
    }

    /// How many times each layer's backward ran.
    pub fn backward_visits(&self) -> &[u64] {
        &self.backward_visits
    }

    /// Total gradient-buffer bytes across trainable layers.
    pub fn buffer_bytes_total(&self) -> usize {
        self.buffers.values().map(|b| b.byte_size()).sum()
    }

    /// Running maximum loss of the sparse schedule, if sparse updates are
    /// active.
    pub fn max_loss_observed(&self) -> Option<f32> {
        self.sparse.as_ref().map(|s| s.max_loss_observed)
    }

    /// One forward/loss/backward/accumulate step over a single sample;
    /// every `batch_size`-th step applies the buffered updates.
    pub fn train_step(&mut self, sample: &QTensor, label: usize) -> Result<StepMetrics> {
        let (logits, tape) = forward_train(&self.model, &mut self.calib, &Value::Q(sample.clone()))?;
        let logits_f = logits.to_float();
        let (loss, d_logits) = softmax_xent(&logits_f, label)?;

        let bwd = match &mut self.sparse {
            Some(state) => {
                state.observe_loss(loss);
                let mut selector = LossAdaptiveSelector {
                    lambda_min: state.config.lambda_min,
                    lambda_max: state.config.lambda_max,
                    ratio: state.loss_ratio(loss),
                };
                backward_with(&self.model, &mut self.calib, &tape, &d_logits, &mut selector)?
            }
            None => backward(&self.model, &mut self.calib, &tape, &d_logits)?,
        };

        for (l, grad) in &bwd.grads {
            self.buffers
                .get_mut(l)
                .ok_or_else(|| Error::InvalidModel("gradient for an untracked layer".to_string()))?
                .accumulate(grad)?;
        }
        for &l in &bwd.visited {
            self.backward_visits[l] += 1;
        }

        self.steps += 1;
        self.macs_forward_total += self.forward_macs_per_step;
        self.macs_backward_total += bwd.macs;

        let mut applied_update = false;
        if self.steps % self.config.batch_size as u64 == 0 && !self.buffers.is_empty() {
            let sample_scale = sample.qparams.scale;
            let layer_indices: Vec<usize> = self.buffers.keys().copied().collect();
            for l in layer_indices {
                let scale = if self.model.layer(l).is_quantized() {
                    input_scale(&self.model, &self.calib, l, sample_scale)?
                } else {
                    1.0
                };
                let buf = self.buffers.get_mut(&l).expect("buffer exists");
                apply_update(
                    self.model.layer_mut(l),
                    buf,
                    self.config.learning_rate,
                    self.config.batch_size,
                    scale,
                )?;
            }
            applied_update = true;
        }

        let selected_fraction_mean = if bwd.selection.is_empty() {
            1.0
        } else {
            bwd.selection
                .iter()
                .map(|&(_, sel, total)| sel as f32 / total as f32)
                .sum::<f32>()
                / bwd.selection.len() as f32
        };

        Ok(StepMetrics {
            loss,
            macs_forward: self.forward_macs_per_step,
            macs_backward: bwd.macs,
            selection: bwd.selection,
            selected_fraction_mean,
            applied_update,
        })
    }
}
