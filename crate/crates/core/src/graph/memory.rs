//! Static memory planning: liveness analysis over one execution of the
//! model and a first-fit arena assignment for the feature-map segment.
//!
//! The report splits RAM/Flash the way an on-device deployment would:
//! short-lived feature maps (arena-reused), trainable weights plus their
//! gradient buffers (RAM, rewritten at runtime), and frozen weights
//! (Flash, read-only).

use alloc::vec::Vec;

use crate::graph::{cache_requirements, compute_last, ExecMode, Model};
use crate::layers::LayerSpec;

/// The three memory segments of a deployed model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    /// Peak of the feature-map arena: activations, backward caches, and
    /// error tensors under first-fit reuse.
    pub feature_map_bytes: usize,
    /// Trainable weights, biases, and their gradient accumulation buffers
    /// including running statistics.
    pub trainable_weight_and_gradbuf_bytes: usize,
    /// Frozen weights and biases (flashable).
    pub static_weight_bytes: usize,
}

/// One tensor's footprint and lifetime, in execution node time.
/// Intervals are inclusive; two tensors conflict when their intervals
/// intersect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorLife {
    pub bytes: usize,
    pub start: u32,
    pub end: u32,
}

impl TensorLife {
    fn overlaps(&self, other: &TensorLife) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Size of one layer's gradient accumulation state: float accumulator over
/// the weight shape, float bias accumulator, per-structure running mean and
/// variance basis, and the two counters. Independent of batch size by
/// construction.
pub fn gradient_buffer_bytes(weight_elems: usize, bias_len: usize, out_structures: usize) -> usize {
    4 * weight_elems + 4 * bias_len + 8 * out_structures + 12
}

fn value_bytes(elems: usize, quantized: bool) -> usize {
    if quantized {
        elems
    } else {
        4 * elems
    }
}

/// Builds the liveness intervals of one forward (and, in train mode,
/// backward) execution.
///
/// Node times: forward node of layer `l` at `t = l`, the loss at `t = L`,
/// and the backward of layer `l` at `t = 2L - l`, where `L` is the number
/// of compute layers. Tape-cached tensors live until their consuming
/// backward node; error tensors live from their producing backward node to
/// the next one.
pub fn liveness(model: &Model, mode: ExecMode) -> Vec<TensorLife> {
    let last = compute_last(model);
    let l_count = (last + 1) as u32;
    let needs = cache_requirements(model, mode);
    let earliest = match mode {
        ExecMode::Train => model.earliest_trainable(),
        ExecMode::Infer => None,
    };
    let bwd_node = |l: usize| 2 * l_count - l as u32;

    let mut items = Vec::new();

    // Input sample.
    let in_elems: usize = model.input_shape().iter().product();
    let in_quant = !matches!(model.precision_mode(), super::PrecisionMode::Float32);
    let mut input_end = 0u32;
    if needs[0].input {
        input_end = bwd_node(0);
    }
    items.push(TensorLife {
        bytes: value_bytes(in_elems, in_quant),
        start: 0,
        end: input_end,
    });

    // Layer outputs.
    for l in 0..=last {
        let (_, out_shape) = model.layer_shapes(l);
        let elems: usize = out_shape.iter().product();
        let mut end = (l + 1) as u32; // consumed by the next layer (or the loss at t = L)
        if l + 1 <= last && needs[l + 1].input {
            end = end.max(bwd_node(l + 1));
        }
        items.push(TensorLife {
            bytes: value_bytes(elems, model.quantized_out(l)),
            start: l as u32,
            end,
        });
    }

    // Backward caches: ReLU masks and pool argmax, one byte per element.
    for l in 0..=last {
        let (_, out_shape) = model.layer_shapes(l);
        let elems: usize = out_shape.iter().product();
        if needs[l].relu_mask {
            items.push(TensorLife { bytes: elems, start: l as u32, end: bwd_node(l) });
        }
        if needs[l].argmax {
            items.push(TensorLife { bytes: elems, start: l as u32, end: bwd_node(l) });
        }
    }

    // Error tensors.
    if let Some(earliest) = earliest {
        let logits_elems: usize = model.output_shape().iter().product();
        items.push(TensorLife {
            bytes: value_bytes(logits_elems, model.quantized_out(last)),
            start: l_count,
            end: l_count + 1,
        });
        for l in (earliest + 1)..=last {
            let (in_shape, _) = model.layer_shapes(l);
            let elems: usize = in_shape.iter().product();
            let quant_in = if l == 0 { in_quant } else { model.quantized_out(l - 1) };
            items.push(TensorLife {
                bytes: value_bytes(elems, quant_in),
                start: bwd_node(l),
                end: bwd_node(l) + 1,
            });
        }
    }

    items
}

/// Greedy first-fit arena assignment: tensors are placed in order of
/// liveness start at the lowest offset where they fit among already placed,
/// time-overlapping tensors. Returns the arena peak in bytes.
pub fn first_fit_peak(items: &[TensorLife]) -> usize {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| (items[i].start, i));

    let mut placed: Vec<(usize, TensorLife)> = Vec::new(); // (offset, life)
    let mut peak = 0usize;
    for idx in order {
        let item = items[idx];
        if item.bytes == 0 {
            continue;
        }
        let mut conflicts: Vec<(usize, usize)> = placed
            .iter()
            .filter(|(_, p)| p.overlaps(&item))
            .map(|&(off, p)| (off, p.bytes))
            .collect();
        conflicts.sort_unstable();
        let mut offset = 0usize;
        for (c_off, c_bytes) in conflicts {
            if offset + item.bytes <= c_off {
                break;
            }
            offset = offset.max(c_off + c_bytes);
        }
        peak = peak.max(offset + item.bytes);
        placed.push((offset, item));
    }
    peak
}

/// Computes the three memory segments for the given execution mode.
/// Deterministic: identical model and mode always produce the same report.
pub fn plan_memory(model: &Model, mode: ExecMode) -> MemoryReport {
    let feature_map_bytes = first_fit_peak(&liveness(model, mode));

    let mut trainable = 0usize;
    let mut static_b = 0usize;
    for (i, layer) in model.layers().iter().enumerate() {
        let (weight_bytes, weight_elems, bias_len, out_structures) = match layer {
            LayerSpec::QConv2d { geom, weight, .. } => {
                (weight.len(), weight.len(), geom.out_channels, geom.out_channels)
            }
            LayerSpec::Conv2d { geom, weight, .. } => {
                (4 * weight.len(), weight.len(), geom.out_channels, geom.out_channels)
            }
            LayerSpec::QLinear { geom, weight, .. } => {
                (weight.len(), weight.len(), geom.out_features, geom.out_features)
            }
            LayerSpec::Linear { geom, weight, .. } => {
                (4 * weight.len(), weight.len(), geom.out_features, geom.out_features)
            }
            _ => continue,
        };
        let storage = weight_bytes + 4 * bias_len;
        if model.trainable().contains(&i) {
            trainable += storage + gradient_buffer_bytes(weight_elems, bias_len, out_structures);
        } else {
            static_b += storage;
        }
    }

    MemoryReport {
        feature_map_bytes,
        trainable_weight_and_gradbuf_bytes: trainable,
        static_weight_bytes: static_b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn life(bytes: usize, start: u32, end: u32) -> TensorLife {
        TensorLife { bytes, start, end }
    }

    #[test]
    fn disjoint_lifetimes_share_space() {
        let peak = first_fit_peak(&[life(100, 0, 1), life(100, 2, 3)]);
        assert_eq!(peak, 100);
    }

    #[test]
    fn overlapping_lifetimes_stack() {
        let peak = first_fit_peak(&[life(100, 0, 2), life(100, 1, 3)]);
        assert_eq!(peak, 200);
    }

    #[test]
    fn freed_slot_is_reused() {
        // a dies at 1; c (starting at 2) fits into a's slot under b
        let peak = first_fit_peak(&[life(64, 0, 1), life(32, 1, 4), life(64, 2, 4)]);
        assert_eq!(peak, 96);
    }

    #[test]
    fn empty_set_has_zero_peak() {
        assert_eq!(first_fit_peak(&[]), 0);
    }
}
