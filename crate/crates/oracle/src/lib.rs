//! Independent float32 reference for the test surface.
//!
//! Everything here is written as plain direct loops against raw slices and
//! deliberately shares no kernel code with `qtrain-core`; agreement between
//! the two is evidence, not tautology. Reduction orders mirror the engine's
//! documented fixed orders so float32 comparisons can be exact. Not built
//! for speed.

pub mod arena;
pub mod kernels;
pub mod model;

pub use arena::brute_force_arena;
pub use kernels::*;
pub use model::{OracleGrads, OracleLayer, OracleModel};

/// Central finite differences of `loss` with respect to `params`,
/// elementwise: `(f(x + h) - f(x - h)) / 2h`.
pub fn finite_diff<F>(mut loss: F, params: &mut [f32], h: f32) -> Vec<f32>
where
    F: FnMut(&[f32]) -> f32,
{
    assert!(h > 0.0, "step must be positive");
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(params);
        params[i] = orig - h;
        let down = loss(params);
        params[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Relative-error metric used by the gradient checks:
/// `max |a - b| / max(1, |a|)`, robust near zero gradients.
pub fn max_relative_error(reference: &[f32], got: &[f32]) -> f32 {
    assert_eq!(reference.len(), got.len());
    let mut worst = 0.0f32;
    for (&a, &b) in reference.iter().zip(got) {
        let denom = a.abs().max(1.0);
        worst = worst.max((a - b).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let mut w = [3.0f32];
        let g = finite_diff(|p| p[0] * p[0], &mut w, 1e-3);
        assert!((g[0] - 6.0).abs() < 1e-3, "{}", g[0]);
        assert_eq!(w[0], 3.0); // restored
    }

    #[test]
    fn linear_is_exact_at_any_step() {
        let mut w = [1.5f32, -2.0];
        for h in [1e-1, 1e-3, 1e-5] {
            let g = finite_diff(|p| 4.0 * p[0] - 2.5 * p[1], &mut w, h);
            assert!((g[0] - 4.0).abs() < 1e-2);
            assert!((g[1] + 2.5).abs() < 1e-2);
        }
    }

    #[test]
    fn softmax_xent_gradient_check() {
        let mut logits = [0.3f32, -1.2, 0.9, 0.05];
        let label = 2usize;
        let analytic = kernels::softmax_xent(&logits, label).1;
        let numeric = finite_diff(|p| kernels::softmax_xent(p, label).0, &mut logits, 1e-3);
        assert!(max_relative_error(&numeric, &analytic) < 1e-4);
    }
}
