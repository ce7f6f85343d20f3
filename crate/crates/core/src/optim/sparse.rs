//! Dynamic sparse gradient updates.
//!
//! Per training sample, each weighted layer keeps only the `k` error
//! structures (conv channels, linear rows) with the largest L1 magnitude;
//! the rest contribute neither weight gradients nor propagated error. The
//! rate `k/N` adapts to training progress: it rises towards `lambda_max`
//! when the current loss is close to the worst loss seen so far and
//! settles at `lambda_min` as the loss converges towards zero.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::qcore::Value;

/// Bounds of the per-layer update rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseConfig {
    pub lambda_min: f32,
    pub lambda_max: f32,
}

impl SparseConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lambda_min)
            && (0.0..=1.0).contains(&self.lambda_max)
            && self.lambda_min <= self.lambda_max;
        if !ok {
            return Err(Error::InvalidArgument(
                "sparse bounds must satisfy 0 <= lambda_min <= lambda_max <= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Config plus the running maximum loss the schedule normalizes against.
#[derive(Debug, Clone)]
pub struct SparseState {
    pub config: SparseConfig,
    pub max_loss_observed: f32,
}

impl SparseState {
    pub fn new(config: SparseConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, max_loss_observed: 0.0 })
    }

    /// Folds a sample's loss into the running maximum.
    pub fn observe_loss(&mut self, loss: f32) {
        if loss > self.max_loss_observed {
            self.max_loss_observed = loss;
        }
    }

    /// Normalized loss ratio in `[0, 1]`; 1 when no loss has been observed
    /// yet.
    pub fn loss_ratio(&self, current_loss: f32) -> f32 {
        if self.max_loss_observed > 0.0 {
            (current_loss / self.max_loss_observed).clamp(0.0, 1.0)
        } else {
            1.0
        }
    }
}

/// The per-layer structure count to keep:
/// `k = floor(min(lambda_min + r * (lambda_max - lambda_min), 1) * n)`,
/// clamped to at least 1 whenever the layer has structures at all.
pub fn update_count(lambda_min: f32, lambda_max: f32, r: f32, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let rate = (lambda_min + r * (lambda_max - lambda_min)).min(1.0);
    let k = libm::floorf(rate * n as f32) as usize;
    k.clamp(1, n)
}

/// Updates the running maximum with `current_loss`, then evaluates the
/// schedule for a layer with `structures` selectable structures.
pub fn sparse_rate(state: &mut SparseState, current_loss: f32, structures: usize) -> usize {
    state.observe_loss(current_loss);
    let r = state.loss_ratio(current_loss);
    update_count(state.config.lambda_min, state.config.lambda_max, r, structures)
}

/// Indices of the `k` structures with the largest L1 norm of the
/// dequantized error, ascending. A structure is a channel for rank-3
/// (convolutional) errors and a single element for rank-1 (linear) errors.
/// Ties break towards the lower index.
pub fn select_structures(e_out: &Value, k: usize) -> Vec<usize> {
    let shape = e_out.shape();
    let (n, elems) = match shape.len() {
        3 => (shape[0], shape[1] * shape[2]),
        _ => (e_out.len(), 1),
    };
    if k >= n {
        return (0..n).collect();
    }

    // The positive scale factors out of the ranking, so quantized norms
    // stay in integer arithmetic (zero-point corrected).
    let mut ranked: Vec<(usize, f64)> = match e_out {
        Value::Q(t) => {
            let z = t.qparams.zero_point as i64;
            (0..n)
                .map(|c| {
                    let sum: i64 = t.data()[c * elems..(c + 1) * elems]
                        .iter()
                        .map(|&q| (q as i64 - z).abs())
                        .sum();
                    (c, sum as f64)
                })
                .collect()
        }
        Value::F(t) => (0..n)
            .map(|c| {
                let sum: f64 = t.data()[c * elems..(c + 1) * elems]
                    .iter()
                    .map(|&v| v.abs() as f64)
                    .sum();
                (c, sum)
            })
            .collect(),
    };
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let mut chosen: Vec<usize> = ranked[..k].iter().map(|&(c, _)| c).collect();
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{quantize_tensor, FTensor};
    use alloc::vec;

    fn state(min: f32, max: f32) -> SparseState {
        SparseState::new(SparseConfig { lambda_min: min, lambda_max: max }).unwrap()
    }

    #[test]
    fn perfect_sample_floors_at_lambda_min() {
        let mut s = state(0.1, 0.5);
        s.observe_loss(2.0); // training has seen losses
        assert_eq!(sparse_rate(&mut s, 0.0, 100), 10);
    }

    #[test]
    fn worst_sample_hits_lambda_max() {
        let mut s = state(0.1, 0.5);
        s.observe_loss(2.0);
        assert_eq!(sparse_rate(&mut s, 2.0, 100), 50);
    }

    #[test]
    fn rate_clamps_at_one() {
        let mut s = state(0.8, 1.0);
        s.observe_loss(1.0);
        assert_eq!(sparse_rate(&mut s, 1.0, 100), 100);
    }

    #[test]
    fn zero_structures_select_nothing() {
        let mut s = state(0.1, 0.5);
        assert_eq!(sparse_rate(&mut s, 1.0, 0), 0);
    }

    #[test]
    fn first_sample_uses_full_ratio() {
        let mut s = state(0.1, 0.5);
        // max starts unset; the first observation normalizes to r = 1
        assert_eq!(sparse_rate(&mut s, 0.7, 100), 50);
        assert_eq!(s.max_loss_observed, 0.7);
    }

    #[test]
    fn at_least_one_structure_survives() {
        let mut s = state(0.0, 0.01);
        s.observe_loss(5.0);
        assert_eq!(sparse_rate(&mut s, 0.0, 64), 1);
    }

    #[test]
    fn full_selection_returns_everything() {
        let t = quantize_tensor(&FTensor::new(vec![4], vec![0.1, -0.8, 0.3, 0.0]).unwrap()).unwrap();
        assert_eq!(select_structures(&Value::Q(t), 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_hot_channel_is_found() {
        let mut data = vec![0.0f32; 3 * 4];
        for e in 4..8 {
            data[e] = 0.9; // channel 1 carries all the error
        }
        let t = quantize_tensor(&FTensor::new(vec![3, 2, 2], data).unwrap()).unwrap();
        assert_eq!(select_structures(&Value::Q(t), 1), vec![1]);
    }

    #[test]
    fn ranking_matches_exhaustive_oracle_with_ties() {
        let vals = vec![0.5, -0.5, 0.25, 0.5, 0.0, -1.0, 0.75, 0.25];
        let t = FTensor::new(vec![8], vals.clone()).unwrap();
        // oracle: stable sort by |v| descending, ties to lower index
        let mut oracle: Vec<usize> = (0..8).collect();
        oracle.sort_by(|&a, &b| {
            vals[b]
                .abs()
                .partial_cmp(&vals[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut expect = oracle[..3].to_vec();
        expect.sort_unstable();
        assert_eq!(select_structures(&Value::F(t), 3), expect);
    }
}
