//! Model container, tape-recorded forward execution, backward traversal,
//! range calibration, and the memory planner.
//!
//! Models are strictly sequential layer chains. The forward pass records a
//! [`Tape`] holding exactly the tensors the backward of the trainable
//! suffix will need (cached inputs, ReLU masks, pool argmax indices);
//! backward then walks the suffix in reverse and never visits layers in
//! front of the earliest trainable one.

mod memory;

pub use memory::{
    first_fit_peak, gradient_buffer_bytes, liveness, plan_memory, MemoryReport, TensorLife,
};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{
    self, conv2d_backward, conv2d_forward, dequant_boundary, dequant_boundary_backward,
    linear_backward, linear_forward, maxpool2d_backward_f, maxpool2d_backward_q,
    maxpool2d_forward_f, maxpool2d_forward_q, qconv2d_backward, qconv2d_forward, qlinear_backward,
    qlinear_forward, relu_backward_f, relu_backward_q, relu_forward_f, relu_forward_q, ConvGeometry,
    LayerGrad, LayerKind, LayerSpec, ValueRange,
};
use crate::qcore::{
    dequantize_tensor, derive_qparams, quantize_tensor, FTensor, QTensor, QuantParams, Value,
};

/// The three precision configurations a model can run in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecisionMode {
    /// The complete network is quantized.
    Uint8,
    /// Quantized backbone with a floating-point classification head behind
    /// a single dequantization boundary.
    Mixed,
    /// Everything in float32.
    Float32,
}

impl core::fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            PrecisionMode::Uint8 => "uint8",
            PrecisionMode::Mixed => "mixed",
            PrecisionMode::Float32 => "float32",
        })
    }
}

/// Whether an execution caches for backward or not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Infer,
    Train,
}

/// A sequential model: ordered layers, the set of trainable weighted
/// layers, and the precision configuration the chain was validated
/// against.
#[derive(Debug, Clone)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    trainable: BTreeSet<usize>,
    precision_mode: PrecisionMode,
    /// Cached per-layer (in_shape, out_shape, quantized_out) from
    /// validation.
    shapes: Vec<(Vec<usize>, Vec<usize>, bool)>,
}

impl Model {
    /// Builds and validates a model. All weighted layers start trainable.
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        precision_mode: PrecisionMode,
    ) -> Result<Self> {
        let shapes = validate_chain(&input_shape, &layers, precision_mode)?;
        let trainable = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_weighted())
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            input_shape,
            layers,
            trainable,
            precision_mode,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &LayerSpec {
        &self.layers[idx]
    }

    pub(crate) fn layer_mut(&mut self, idx: usize) -> &mut LayerSpec {
        &mut self.layers[idx]
    }

    pub fn precision_mode(&self) -> PrecisionMode {
        self.precision_mode
    }

    pub fn trainable(&self) -> &BTreeSet<usize> {
        &self.trainable
    }

    /// Indices of weighted layers, in order.
    pub fn weighted_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_weighted())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn earliest_trainable(&self) -> Option<usize> {
        self.trainable.iter().next().copied()
    }

    /// Restricts training to the given layer indices (must be weighted).
    pub fn set_trainable(&mut self, set: BTreeSet<usize>) -> Result<()> {
        for &i in &set {
            if i >= self.layers.len() || !self.layers[i].is_weighted() {
                return Err(Error::InvalidModel(format!(
                    "trainable index {i} is not a weighted layer"
                )));
            }
        }
        self.trainable = set;
        Ok(())
    }

    /// Input and output shape of a layer, from validation.
    pub fn layer_shapes(&self, idx: usize) -> (&[usize], &[usize]) {
        let (i, o, _) = &self.shapes[idx];
        (i, o)
    }

    /// Whether the value at a layer's output is quantized.
    pub fn quantized_out(&self, idx: usize) -> bool {
        self.shapes[idx].2
    }

    /// Shape of the logits the model produces.
    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(|(_, o, _)| o.as_slice()).unwrap_or(&self.input_shape)
    }

    /// Reinitializes the last `k` weighted layers (uniform in
    /// `[-sqrt(1/fan_in), sqrt(1/fan_in)]`, fresh qparams, zero bias) and
    /// marks exactly those layers trainable. `k = 0` leaves the model
    /// untouched.
    pub fn reset_layers<R: Rng>(&mut self, k: usize, rng: &mut R) -> Result<()> {
        let weighted = self.weighted_indices();
        if k > weighted.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot reset {k} layers; model has {} weighted layers",
                weighted.len()
            )));
        }
        if k == 0 {
            return Ok(());
        }
        let chosen: Vec<usize> = weighted[weighted.len() - k..].to_vec();
        for &idx in &chosen {
            let fresh = match &self.layers[idx] {
                LayerSpec::QConv2d { geom, relu, .. } => layers::init_qconv2d(*geom, *relu, rng)?,
                LayerSpec::QLinear { geom, .. } => layers::init_qlinear(*geom, rng)?,
                LayerSpec::Conv2d { geom, .. } => layers::init_conv2d(*geom, rng)?,
                LayerSpec::Linear { geom, .. } => layers::init_linear(*geom, rng)?,
                other => {
                    return Err(Error::InvalidModel(format!(
                        "cannot reset weightless layer {}",
                        other.kind()
                    )))
                }
            };
            self.layers[idx] = fresh;
        }
        self.trainable = chosen.into_iter().collect();
        Ok(())
    }
}

/// Validates shape and precision consistency of a layer chain and returns
/// per-layer (in_shape, out_shape, quantized_out).
fn validate_chain(
    input_shape: &[usize],
    layers: &[LayerSpec],
    mode: PrecisionMode,
) -> Result<Vec<(Vec<usize>, Vec<usize>, bool)>> {
    if layers.is_empty() {
        return Err(Error::InvalidModel("model has no layers".to_string()));
    }
    if input_shape.is_empty() || input_shape.iter().product::<usize>() == 0 {
        return Err(Error::InvalidModel("input shape must be non-empty".to_string()));
    }

    let mut quantized = !matches!(mode, PrecisionMode::Float32);
    let mut dequant_count = 0usize;
    let mut shape = input_shape.to_vec();
    let mut out: Vec<(Vec<usize>, Vec<usize>, bool)> = Vec::with_capacity(layers.len());

    for (i, layer) in layers.iter().enumerate() {
        layer.validate()?;
        if layer.kind() == LayerKind::SoftmaxXEnt && i + 1 != layers.len() {
            return Err(Error::InvalidModel(
                "softmax_xent must be the last layer".to_string(),
            ));
        }
        match layer {
            LayerSpec::QConv2d { .. } | LayerSpec::QLinear { .. } => {
                if !quantized {
                    return Err(Error::InvalidModel(format!(
                        "layer {i}: quantized layer in the float region"
                    )));
                }
                if mode == PrecisionMode::Float32 {
                    return Err(Error::InvalidModel(
                        "float32 mode admits no quantized layers".to_string(),
                    ));
                }
            }
            LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } => {
                if quantized {
                    return Err(Error::InvalidModel(format!(
                        "layer {i}: float layer in the quantized region"
                    )));
                }
                if mode == PrecisionMode::Uint8 {
                    return Err(Error::InvalidModel(
                        "uint8 mode admits no float layers".to_string(),
                    ));
                }
            }
            LayerSpec::Dequant => {
                if !quantized {
                    return Err(Error::InvalidModel(format!(
                        "layer {i}: dequant boundary in the float region"
                    )));
                }
                if mode != PrecisionMode::Mixed {
                    return Err(Error::InvalidModel(
                        "dequant boundary only exists in mixed mode".to_string(),
                    ));
                }
                quantized = false;
                dequant_count += 1;
            }
            _ => {}
        }
        shape = layer
            .out_shape(&shape)
            .map_err(|e| Error::ShapeMismatch(format!("layer {i} ({}): {e}", layer.kind())))?;
        out.push((
            if i == 0 {
                input_shape.to_vec()
            } else {
                out[i - 1].1.clone()
            },
            shape.clone(),
            quantized,
        ));
    }

    if mode == PrecisionMode::Mixed && dequant_count != 1 {
        return Err(Error::InvalidModel(format!(
            "mixed mode requires exactly one dequant boundary, found {dequant_count}"
        )));
    }
    Ok(out)
}

/// What a layer must cache during a training forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheNeeds {
    pub input: bool,
    pub relu_mask: bool,
    pub argmax: bool,
}

/// Static dependency audit: which tensors each layer caches in the given
/// mode. Inference caches nothing; training caches exactly what the
/// backward of the trainable suffix consumes.
pub fn cache_requirements(model: &Model, mode: ExecMode) -> Vec<CacheNeeds> {
    let mut needs = alloc::vec![CacheNeeds::default(); model.layers().len()];
    if mode == ExecMode::Infer {
        return needs;
    }
    let Some(earliest) = model.earliest_trainable() else {
        return needs;
    };
    for (i, layer) in model.layers().iter().enumerate() {
        if i < earliest {
            continue;
        }
        match layer {
            LayerSpec::QConv2d { relu, .. } => {
                needs[i].input = model.trainable().contains(&i);
                needs[i].relu_mask = *relu;
            }
            LayerSpec::QLinear { .. } | LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } => {
                needs[i].input = model.trainable().contains(&i);
            }
            LayerSpec::MaxPool2d { .. } => needs[i].argmax = true,
            LayerSpec::ReLU => needs[i].relu_mask = true,
            LayerSpec::Flatten | LayerSpec::Dequant | LayerSpec::SoftmaxXEnt => {}
        }
    }
    needs
}

/// Recorded forward execution: per layer, the tensors its backward needs.
#[derive(Debug, Clone)]
pub struct Tape {
    entries: Vec<TapeEntry>,
    earliest: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TapeEntry {
    pub input: Option<Value>,
    pub relu_mask: Option<Vec<bool>>,
    pub argmax: Option<Vec<u8>>,
}

impl Tape {
    pub fn entries(&self) -> &[TapeEntry] {
        &self.entries
    }

    pub fn earliest_trainable(&self) -> Option<usize> {
        self.earliest
    }
}

/// Calibrated quantization ranges for activations and propagated errors.
///
/// Quantized kernels need target qparams before they run; these come from
/// a float dry-run at model load ([`CalibState::initialize`]) and are
/// refreshed from the true ranges each kernel observes with an exponential
/// moving average (factor 0.99) on every training step.
#[derive(Debug, Clone)]
pub struct CalibState {
    act: Vec<Option<ValueRange>>,
    err: Vec<Option<ValueRange>>,
}

const EMA_KEEP: f32 = 0.99;

impl CalibState {
    /// Initializes ranges from a float dry-run over the given calibration
    /// samples (envelope of per-sample ranges). Labels drive the loss from
    /// which error ranges are derived.
    pub fn initialize(model: &Model, samples: &[(&QTensor, usize)]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument(
                "calibration needs at least one sample".to_string(),
            ));
        }
        let n_layers = model.layers().len();
        let mut act: Vec<Option<ValueRange>> = alloc::vec![None; n_layers];
        let mut err: Vec<Option<ValueRange>> = alloc::vec![None; n_layers];

        // Per-sample float values, advanced layer by layer so that each
        // quantized layer's activation range (and thus the scale governing
        // the next bias interpretation) is settled before moving deeper.
        let mut values: Vec<FTensor> = Vec::with_capacity(samples.len());
        for (s, _) in samples {
            if s.shape() != model.input_shape() {
                return Err(Error::ShapeMismatch(format!(
                    "calibration sample shape {:?} does not match model input {:?}",
                    s.shape(),
                    model.input_shape()
                )));
            }
            values.push(dequantize_tensor(s));
        }
        let mut masks: Vec<Vec<Option<Vec<bool>>>> =
            alloc::vec![alloc::vec![None; n_layers]; samples.len()];
        let mut argmaxes: Vec<Vec<Option<Vec<u8>>>> =
            alloc::vec![alloc::vec![None; n_layers]; samples.len()];
        let mut in_scale = samples[0].0.qparams.scale;

        for (l, layer) in model.layers().iter().enumerate() {
            match layer {
                LayerSpec::QConv2d { geom, relu, weight, bias } => {
                    let w_f = dequantize_tensor(weight);
                    let bias_scale = weight.qparams.scale * in_scale;
                    let bias_f: Vec<f32> = bias.iter().map(|&b| b as f32 * bias_scale).collect();
                    let mut range = ValueRange::EMPTY;
                    for (s, v) in values.iter_mut().enumerate() {
                        let mut y = conv2d_forward(v, &w_f, &bias_f, geom)?;
                        if *relu {
                            let (clamped, mask) = relu_forward_f(&y);
                            y = clamped;
                            masks[s][l] = Some(mask);
                        }
                        let (lo, hi) = y.min_max();
                        range.observe(lo);
                        range.observe(hi);
                        *v = y;
                    }
                    act[l] = Some(range);
                    in_scale = derive_qparams(range.min, range.max)?.scale;
                }
                LayerSpec::QLinear { weight, bias, .. } => {
                    let w_f = dequantize_tensor(weight);
                    let bias_scale = weight.qparams.scale * in_scale;
                    let bias_f: Vec<f32> = bias.iter().map(|&b| b as f32 * bias_scale).collect();
                    let mut range = ValueRange::EMPTY;
                    for v in values.iter_mut() {
                        let y = linear_forward(v, &w_f, &bias_f)?;
                        let (lo, hi) = y.min_max();
                        range.observe(lo);
                        range.observe(hi);
                        *v = y;
                    }
                    act[l] = Some(range);
                    in_scale = derive_qparams(range.min, range.max)?.scale;
                }
                LayerSpec::Conv2d { geom, weight, bias } => {
                    for v in values.iter_mut() {
                        *v = conv2d_forward(v, weight, bias, geom)?;
                    }
                }
                LayerSpec::Linear { weight, bias, .. } => {
                    for v in values.iter_mut() {
                        *v = linear_forward(v, weight, bias)?;
                    }
                }
                LayerSpec::MaxPool2d { size } => {
                    for (s, v) in values.iter_mut().enumerate() {
                        let (y, am) = maxpool2d_forward_f(v, *size)?;
                        argmaxes[s][l] = Some(am);
                        *v = y;
                    }
                }
                LayerSpec::ReLU => {
                    for (s, v) in values.iter_mut().enumerate() {
                        let (y, mask) = relu_forward_f(v);
                        masks[s][l] = Some(mask);
                        *v = y;
                    }
                }
                LayerSpec::Flatten => {
                    for v in values.iter_mut() {
                        let n = v.len();
                        *v = v.reshape(alloc::vec![n])?;
                    }
                }
                LayerSpec::Dequant | LayerSpec::SoftmaxXEnt => {}
            }
        }

        // Error ranges from a float backward per sample, walking the full
        // chain down to layer 1 (layer 0's input error is never produced).
        let last = compute_last(model);
        for (s, (_, label)) in samples.iter().enumerate() {
            let (_, d_logits) = layers::softmax_xent(&values[s], *label)?;
            let mut e = d_logits;
            for l in (1..=last).rev() {
                match model.layer(l) {
                    LayerSpec::QConv2d { geom, relu, weight, .. } => {
                        let w_f = dequantize_tensor(weight);
                        if *relu {
                            if let Some(mask) = &masks[s][l] {
                                e = relu_backward_f(&e, mask)?;
                            }
                        }
                        let g = conv2d_backward(&e, None, &w_f, geom, true, None)?;
                        e = g.d_input.expect("requested d_input");
                        observe_err(&mut err, l, &e);
                    }
                    LayerSpec::QLinear { weight, .. } => {
                        let w_f = dequantize_tensor(weight);
                        let g = linear_backward(&e, None, &w_f, true, None)?;
                        e = g.d_input.expect("requested d_input");
                        observe_err(&mut err, l, &e);
                    }
                    LayerSpec::Conv2d { geom, weight, .. } => {
                        let g = conv2d_backward(&e, None, weight, geom, true, None)?;
                        e = g.d_input.expect("requested d_input");
                    }
                    LayerSpec::Linear { weight, .. } => {
                        let g = linear_backward(&e, None, weight, true, None)?;
                        e = g.d_input.expect("requested d_input");
                    }
                    LayerSpec::MaxPool2d { size } => {
                        let am = argmaxes[s][l].as_ref().expect("argmax recorded");
                        let in_shape = model.layer_shapes(l).0.to_vec();
                        e = maxpool2d_backward_f(&e, am, &in_shape, *size)?;
                    }
                    LayerSpec::ReLU => {
                        let mask = masks[s][l].as_ref().expect("mask recorded");
                        e = relu_backward_f(&e, mask)?;
                    }
                    LayerSpec::Flatten => {
                        let in_shape = model.layer_shapes(l).0.to_vec();
                        e = e.reshape(in_shape)?;
                    }
                    LayerSpec::Dequant | LayerSpec::SoftmaxXEnt => {}
                }
            }
        }

        Ok(Self { act, err })
    }

    /// A state with no calibrated ranges; valid only for pure-float models.
    pub fn empty(model: &Model) -> Self {
        Self {
            act: alloc::vec![None; model.layers().len()],
            err: alloc::vec![None; model.layers().len()],
        }
    }

    pub fn act_qp(&self, layer: usize) -> Result<QuantParams> {
        let range = self.act[layer].ok_or_else(|| {
            Error::InvalidModel(format!("layer {layer} has no calibrated activation range"))
        })?;
        derive_qparams(range.min, range.max)
    }

    pub fn err_qp(&self, layer: usize) -> Result<QuantParams> {
        let range = self.err[layer].ok_or_else(|| {
            Error::InvalidModel(format!("layer {layer} has no calibrated error range"))
        })?;
        derive_qparams(range.min, range.max)
    }

    fn observe_act_ema(&mut self, layer: usize, obs: ValueRange) {
        ema_update(&mut self.act[layer], obs);
    }

    fn observe_err_ema(&mut self, layer: usize, obs: ValueRange) {
        ema_update(&mut self.err[layer], obs);
    }
}

fn ema_update(slot: &mut Option<ValueRange>, obs: ValueRange) {
    if !obs.is_valid() {
        return;
    }
    match slot {
        Some(r) => {
            r.min = EMA_KEEP * r.min + (1.0 - EMA_KEEP) * obs.min;
            r.max = EMA_KEEP * r.max + (1.0 - EMA_KEEP) * obs.max;
        }
        None => *slot = Some(obs),
    }
}

fn observe_err(err: &mut [Option<ValueRange>], layer: usize, e: &FTensor) {
    let (lo, hi) = e.min_max();
    match &mut err[layer] {
        Some(r) => {
            r.observe(lo);
            r.observe(hi);
        }
        None => {
            err[layer] = Some(ValueRange { min: lo, max: hi });
        }
    }
}

/// Index of the last compute layer (skipping a trailing softmax_xent).
fn compute_last(model: &Model) -> usize {
    let n = model.layers().len();
    if model.layer(n - 1).kind() == LayerKind::SoftmaxXEnt {
        n.saturating_sub(2)
    } else {
        n - 1
    }
}

fn adapt_input(model: &Model, input: &Value) -> Result<Value> {
    if input.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "input shape {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape()
        )));
    }
    match (model.precision_mode(), input) {
        (PrecisionMode::Float32, Value::Q(q)) => Ok(Value::F(dequantize_tensor(q))),
        (PrecisionMode::Float32, Value::F(f)) => Ok(Value::F(f.clone())),
        (_, Value::Q(q)) => Ok(Value::Q(q.clone())),
        (_, Value::F(_)) => Err(Error::ShapeMismatch(
            "quantized model expects a quantized input sample".to_string(),
        )),
    }
}

/// Inference forward pass: caches nothing, mutates nothing.
pub fn forward_infer(model: &Model, calib: &CalibState, input: &Value) -> Result<Value> {
    let mut scratch = calib.clone();
    let (out, _) = run_forward(model, &mut scratch, input, ExecMode::Infer)?;
    Ok(out)
}

/// Training forward pass: records the tape and refreshes activation
/// calibration from the ranges the kernels observed.
pub fn forward_train(model: &Model, calib: &mut CalibState, input: &Value) -> Result<(Value, Tape)> {
    let (out, tape) = run_forward(model, calib, input, ExecMode::Train)?;
    Ok((out, tape.expect("train mode records a tape")))
}

fn run_forward(
    model: &Model,
    calib: &mut CalibState,
    input: &Value,
    mode: ExecMode,
) -> Result<(Value, Option<Tape>)> {
    let needs = cache_requirements(model, mode);
    let mut entries: Vec<TapeEntry> = alloc::vec![TapeEntry::default(); model.layers().len()];
    let mut value = adapt_input(model, input)?;

    for (l, layer) in model.layers().iter().enumerate() {
        if needs[l].input {
            entries[l].input = Some(value.clone());
        }
        value = match layer {
            LayerSpec::QConv2d { geom, relu, weight, bias } => {
                let x = expect_q(&value, l)?;
                let out_qp = calib.act_qp(l)?;
                let (y, range) = qconv2d_forward(x, weight, bias, geom, *relu, out_qp)?;
                if mode == ExecMode::Train {
                    calib.observe_act_ema(l, range);
                    if needs[l].relu_mask {
                        let z = y.qparams.zero_point;
                        entries[l].relu_mask = Some(y.data().iter().map(|&q| q > z).collect());
                    }
                }
                Value::Q(y)
            }
            LayerSpec::QLinear { weight, bias, .. } => {
                let x = expect_q(&value, l)?;
                let out_qp = calib.act_qp(l)?;
                let (y, range) = qlinear_forward(x, weight, bias, out_qp)?;
                if mode == ExecMode::Train {
                    calib.observe_act_ema(l, range);
                }
                Value::Q(y)
            }
            LayerSpec::Conv2d { geom, weight, bias } => {
                let x = expect_f(&value, l)?;
                Value::F(conv2d_forward(x, weight, bias, geom)?)
            }
            LayerSpec::Linear { weight, bias, .. } => {
                let x = expect_f(&value, l)?;
                Value::F(linear_forward(x, weight, bias)?)
            }
            LayerSpec::MaxPool2d { size } => match &value {
                Value::Q(x) => {
                    let (y, am) = maxpool2d_forward_q(x, *size)?;
                    if needs[l].argmax {
                        entries[l].argmax = Some(am);
                    }
                    Value::Q(y)
                }
                Value::F(x) => {
                    let (y, am) = maxpool2d_forward_f(x, *size)?;
                    if needs[l].argmax {
                        entries[l].argmax = Some(am);
                    }
                    Value::F(y)
                }
            },
            LayerSpec::ReLU => match &value {
                Value::Q(x) => {
                    let (y, mask) = relu_forward_q(x);
                    if needs[l].relu_mask {
                        entries[l].relu_mask = Some(mask);
                    }
                    Value::Q(y)
                }
                Value::F(x) => {
                    let (y, mask) = relu_forward_f(x);
                    if needs[l].relu_mask {
                        entries[l].relu_mask = Some(mask);
                    }
                    Value::F(y)
                }
            },
            LayerSpec::Flatten => {
                let n = value.len();
                value.reshape(alloc::vec![n])?
            }
            LayerSpec::Dequant => {
                let x = expect_q(&value, l)?;
                Value::F(dequant_boundary(x))
            }
            LayerSpec::SoftmaxXEnt => value,
        };
    }

    let tape = if mode == ExecMode::Train {
        Some(Tape {
            entries,
            earliest: model.earliest_trainable(),
        })
    } else {
        None
    };
    Ok((value, tape))
}

fn expect_q<'a>(v: &'a Value, layer: usize) -> Result<&'a QTensor> {
    match v {
        Value::Q(t) => Ok(t),
        Value::F(_) => Err(Error::ShapeMismatch(format!(
            "layer {layer} expects a quantized input"
        ))),
    }
}

fn expect_f<'a>(v: &'a Value, layer: usize) -> Result<&'a FTensor> {
    match v {
        Value::F(t) => Ok(t),
        Value::Q(_) => Err(Error::ShapeMismatch(format!(
            "layer {layer} expects a float input"
        ))),
    }
}

/// Decides, per weighted layer, which error structures the backward kernels
/// keep. Returning `None` means dense (all structures).
pub trait StructureSelector {
    fn select(&mut self, layer_idx: usize, e_out: &Value, structures: usize) -> Option<Vec<usize>>;
}

/// The dense selector: never restricts anything.
pub struct DenseSelector;

impl StructureSelector for DenseSelector {
    fn select(&mut self, _: usize, _: &Value, _: usize) -> Option<Vec<usize>> {
        None
    }
}

/// Outcome of a backward pass.
#[derive(Debug)]
pub struct BackwardResult {
    /// Per trainable layer index: its gradients.
    pub grads: BTreeMap<usize, LayerGrad>,
    /// Multiply-accumulates actually executed by backward kernels.
    pub macs: u64,
    /// `(layer, selected, total)` structure counts per weighted layer the
    /// backward visited.
    pub selection: Vec<(usize, usize, usize)>,
    /// Layer indices the traversal visited, latest first.
    pub visited: Vec<usize>,
}

/// Dense backward pass; see [`backward_with`].
pub fn backward(
    model: &Model,
    calib: &mut CalibState,
    tape: &Tape,
    d_logits: &FTensor,
) -> Result<BackwardResult> {
    backward_with(model, calib, tape, d_logits, &mut DenseSelector)
}

/// Propagates the loss gradient back through the trainable suffix.
///
/// Gradients are returned for every trainable layer; `d_input` is not
/// computed for the earliest visited layer, and layers in front of it are
/// never touched. Error ranges observed by quantized kernels refresh the
/// calibration EMA.
pub fn backward_with<S: StructureSelector>(
    model: &Model,
    calib: &mut CalibState,
    tape: &Tape,
    d_logits: &FTensor,
    selector: &mut S,
) -> Result<BackwardResult> {
    if tape.entries.len() != model.layers().len() {
        return Err(Error::InvalidModel(
            "tape does not match model layer count".to_string(),
        ));
    }
    if tape.earliest != model.earliest_trainable() {
        return Err(Error::InvalidModel(
            "trainable set changed between forward and backward".to_string(),
        ));
    }
    let mut result = BackwardResult {
        grads: BTreeMap::new(),
        macs: 0,
        selection: Vec::new(),
        visited: Vec::new(),
    };
    let Some(earliest) = tape.earliest else {
        return Ok(result);
    };
    let last = compute_last(model);
    if d_logits.shape() != model.output_shape() {
        return Err(Error::ShapeMismatch(format!(
            "loss gradient shape {:?} does not match logits {:?}",
            d_logits.shape(),
            model.output_shape()
        )));
    }

    // Head error enters at the precision of the logits.
    let mut error: Value = if model.quantized_out(last) {
        Value::Q(quantize_tensor(d_logits)?)
    } else {
        Value::F(d_logits.clone())
    };

    for l in (earliest..=last).rev() {
        result.visited.push(l);
        let entry = &tape.entries[l];
        let trainable = model.trainable().contains(&l);
        let want_d_input = l > earliest;
        error = match model.layer(l) {
            LayerSpec::QConv2d { geom, relu, weight, .. } => {
                let mut e = expect_q(&error, l)?.clone();
                if *relu {
                    let mask = entry.relu_mask.as_ref().ok_or_else(|| tape_gap(l, "relu mask"))?;
                    e = relu_backward_q(&e, mask)?;
                }
                let sel = selector.select(l, &Value::Q(e.clone()), geom.out_channels);
                let n_sel = sel.as_ref().map(|s| s.len()).unwrap_or(geom.out_channels);
                result.selection.push((l, n_sel, geom.out_channels));
                let x_cached = match (&entry.input, trainable) {
                    (Some(Value::Q(x)), true) => Some(x),
                    (None, true) => return Err(tape_gap(l, "cached input")),
                    _ => None,
                };
                let e_in_qp = if want_d_input { Some(calib.err_qp(l)?) } else { None };
                let g = qconv2d_backward(&e, x_cached, weight, geom, e_in_qp, sel.as_deref())?;
                result.macs += conv_macs(geom, n_sel, want_d_input, trainable);
                finish_quant_layer(l, g, trainable, want_d_input, calib, &mut result)?
            }
            LayerSpec::QLinear { geom, weight, .. } => {
                let e = expect_q(&error, l)?.clone();
                let sel = selector.select(l, &Value::Q(e.clone()), geom.out_features);
                let n_sel = sel.as_ref().map(|s| s.len()).unwrap_or(geom.out_features);
                result.selection.push((l, n_sel, geom.out_features));
                let x_cached = match (&entry.input, trainable) {
                    (Some(Value::Q(x)), true) => Some(x),
                    (None, true) => return Err(tape_gap(l, "cached input")),
                    _ => None,
                };
                let e_in_qp = if want_d_input { Some(calib.err_qp(l)?) } else { None };
                let g = qlinear_backward(&e, x_cached, weight, e_in_qp, sel.as_deref())?;
                result.macs +=
                    linear_macs(geom.in_features, n_sel, want_d_input, trainable);
                finish_quant_layer(l, g, trainable, want_d_input, calib, &mut result)?
            }
            LayerSpec::Conv2d { geom, weight, .. } => {
                let e = expect_f(&error, l)?.clone();
                let sel = selector.select(l, &Value::F(e.clone()), geom.out_channels);
                let n_sel = sel.as_ref().map(|s| s.len()).unwrap_or(geom.out_channels);
                result.selection.push((l, n_sel, geom.out_channels));
                let x_cached = match (&entry.input, trainable) {
                    (Some(Value::F(x)), true) => Some(x),
                    (None, true) => return Err(tape_gap(l, "cached input")),
                    _ => None,
                };
                let g = conv2d_backward(&e, x_cached, weight, geom, want_d_input, sel.as_deref())?;
                result.macs += conv_macs(geom, n_sel, want_d_input, trainable);
                finish_float_layer(l, g, trainable, want_d_input, &mut result)?
            }
            LayerSpec::Linear { geom, weight, .. } => {
                let e = expect_f(&error, l)?.clone();
                let sel = selector.select(l, &Value::F(e.clone()), geom.out_features);
                let n_sel = sel.as_ref().map(|s| s.len()).unwrap_or(geom.out_features);
                result.selection.push((l, n_sel, geom.out_features));
                let x_cached = match (&entry.input, trainable) {
                    (Some(Value::F(x)), true) => Some(x),
                    (None, true) => return Err(tape_gap(l, "cached input")),
                    _ => None,
                };
                let g = linear_backward(&e, x_cached, weight, want_d_input, sel.as_deref())?;
                result.macs +=
                    linear_macs(geom.in_features, n_sel, want_d_input, trainable);
                finish_float_layer(l, g, trainable, want_d_input, &mut result)?
            }
            LayerSpec::MaxPool2d { size } => {
                let am = entry.argmax.as_ref().ok_or_else(|| tape_gap(l, "argmax"))?;
                let in_shape = model.layer_shapes(l).0.to_vec();
                match &error {
                    Value::Q(e) => Value::Q(maxpool2d_backward_q(e, am, &in_shape, *size)?),
                    Value::F(e) => Value::F(maxpool2d_backward_f(e, am, &in_shape, *size)?),
                }
            }
            LayerSpec::ReLU => {
                let mask = entry.relu_mask.as_ref().ok_or_else(|| tape_gap(l, "relu mask"))?;
                match &error {
                    Value::Q(e) => Value::Q(relu_backward_q(e, mask)?),
                    Value::F(e) => Value::F(relu_backward_f(e, mask)?),
                }
            }
            LayerSpec::Flatten => {
                let in_shape = model.layer_shapes(l).0.to_vec();
                error.reshape(in_shape)?
            }
            LayerSpec::Dequant => {
                let e = expect_f(&error, l)?;
                Value::Q(dequant_boundary_backward(e)?)
            }
            LayerSpec::SoftmaxXEnt => error,
        };
    }
    Ok(result)
}

fn tape_gap(layer: usize, what: &str) -> Error {
    Error::InvalidModel(format!("tape is missing {what} for layer {layer}"))
}

/// Folds a quantized kernel result into the traversal state.
fn finish_quant_layer(
    l: usize,
    g: layers::QuantBackward,
    trainable: bool,
    want_d_input: bool,
    calib: &mut CalibState,
    result: &mut BackwardResult,
) -> Result<Value> {
    let next = match g.d_input {
        Some((e_in, range)) => {
            calib.observe_err_ema(l, range);
            Value::Q(e_in)
        }
        None => {
            debug_assert!(!want_d_input);
            Value::F(FTensor::new(alloc::vec![1], alloc::vec![0.0])?) // sentinel, never read
        }
    };
    if trainable {
        result.grads.insert(
            l,
            LayerGrad {
                d_input: None,
                d_weight: g.d_weight,
                d_bias: g.d_bias,
            },
        );
    }
    Ok(next)
}

fn finish_float_layer(
    l: usize,
    g: layers::FloatBackward,
    trainable: bool,
    want_d_input: bool,
    result: &mut BackwardResult,
) -> Result<Value> {
    let next = match g.d_input {
        Some(e_in) => Value::F(e_in),
        None => {
            debug_assert!(!want_d_input);
            Value::F(FTensor::new(alloc::vec![1], alloc::vec![0.0])?) // sentinel, never read
        }
    };
    if trainable {
        result.grads.insert(
            l,
            LayerGrad {
                d_input: None,
                d_weight: g.d_weight,
                d_bias: g.d_bias,
            },
        );
    }
    Ok(next)
}

/// Multiply-accumulates a conv kernel executes per direction, exact under
/// padding (out-of-bounds taps are skipped, not counted).
fn conv_valid_taps(geom: &ConvGeometry) -> u64 {
    let mut vh = 0u64;
    for oi in 0..geom.out_h() {
        for ki in 0..geom.kernel {
            let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
            if ii >= 0 && (ii as usize) < geom.in_h {
                vh += 1;
            }
        }
    }
    let mut vw = 0u64;
    for oj in 0..geom.out_w() {
        for kj in 0..geom.kernel {
            let jj = (oj * geom.stride + kj) as isize - geom.padding as isize;
            if jj >= 0 && (jj as usize) < geom.in_w {
                vw += 1;
            }
        }
    }
    vh * vw
}

fn conv_macs(geom: &ConvGeometry, selected: usize, d_input: bool, d_weight: bool) -> u64 {
    let per_channel = geom.in_channels as u64 * conv_valid_taps(geom);
    let mut macs = 0;
    if d_input {
        macs += selected as u64 * per_channel;
    }
    if d_weight {
        macs += selected as u64 * per_channel;
    }
    macs
}

fn linear_macs(in_features: usize, selected: usize, d_input: bool, d_weight: bool) -> u64 {
    let mut macs = 0;
    if d_input {
        macs += (selected * in_features) as u64;
    }
    if d_weight {
        macs += (selected * in_features) as u64;
    }
    macs
}

/// Multiply-accumulates of one full forward pass (architecture constant).
pub fn forward_macs(model: &Model) -> u64 {
    let mut macs = 0u64;
    for layer in model.layers() {
        match layer {
            LayerSpec::QConv2d { geom, .. } | LayerSpec::Conv2d { geom, .. } => {
                macs += geom.out_channels as u64 * geom.in_channels as u64 * conv_valid_taps(geom);
            }
            LayerSpec::QLinear { geom, .. } | LayerSpec::Linear { geom, .. } => {
                macs += (geom.in_features * geom.out_features) as u64;
            }
            _ => {}
        }
    }
    macs
}

/// Backward multiply-accumulates of a dense (unselected) step for the
/// current trainable set. The denominator of sparse speedup ratios.
pub fn dense_backward_macs(model: &Model) -> u64 {
    let Some(earliest) = model.earliest_trainable() else {
        return 0;
    };
    let last = compute_last(model);
    let mut macs = 0u64;
    for l in earliest..=last {
        let trainable = model.trainable().contains(&l);
        let want_d_input = l > earliest;
        match model.layer(l) {
            LayerSpec::QConv2d { geom, .. } | LayerSpec::Conv2d { geom, .. } => {
                macs += conv_macs(geom, geom.out_channels, want_d_input, trainable);
            }
            LayerSpec::QLinear { geom, .. } | LayerSpec::Linear { geom, .. } => {
                macs += linear_macs(geom.in_features, geom.out_features, want_d_input, trainable);
            }
            _ => {}
        }
    }
    macs
}

/// Scale of the quantized value arriving at layer `l`'s input; `sample_scale`
/// covers the first layer. Used to interpret integer biases
/// (`scale = s_w * s_x`) when weights are requantized.
pub fn input_scale(model: &Model, calib: &CalibState, l: usize, sample_scale: f32) -> Result<f32> {
    let mut idx = l;
    loop {
        if idx == 0 {
            return Ok(sample_scale);
        }
        let prev = idx - 1;
        match model.layer(prev) {
            LayerSpec::QConv2d { .. } | LayerSpec::QLinear { .. } => {
                return Ok(calib.act_qp(prev)?.scale);
            }
            LayerSpec::MaxPool2d { .. } | LayerSpec::ReLU | LayerSpec::Flatten => {
                idx = prev;
            }
            other => {
                return Err(Error::InvalidModel(format!(
                    "layer {l} has no quantized input chain (found {})",
                    other.kind()
                )));
            }
        }
    }
}
