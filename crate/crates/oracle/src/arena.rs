//! Exhaustive optimal arena packing for tiny liveness sets.
//!
//! Validates the engine's first-fit planner at toy scale. Some optimal
//! packing always exists with every offset drawn from the subset sums of
//! the tensor sizes (push each tensor down until it rests on the floor or
//! on another live tensor), so enumerating that grid with branch-and-bound
//! is exact.

use qtrain_core::graph::TensorLife;

const MAX_TENSORS: usize = 6;

/// Minimal achievable arena peak for up to [`MAX_TENSORS`] liveness
/// intervals. Refuses larger sets: the search is exponential.
pub fn brute_force_arena(items: &[TensorLife]) -> Result<usize, String> {
    let live: Vec<TensorLife> = items.iter().copied().filter(|t| t.bytes > 0).collect();
    if live.len() > MAX_TENSORS {
        return Err(format!(
            "brute force arena handles at most {MAX_TENSORS} tensors, got {}",
            live.len()
        ));
    }
    if live.is_empty() {
        return Ok(0);
    }

    // Candidate offsets: 0 plus every subset sum of sizes.
    let mut sums = vec![0usize];
    for t in &live {
        let mut next = Vec::with_capacity(sums.len() * 2);
        for &s in &sums {
            next.push(s);
            next.push(s + t.bytes);
        }
        next.sort_unstable();
        next.dedup();
        sums = next;
    }

    let naive_peak: usize = live.iter().map(|t| t.bytes).sum(); // stack everything
    let mut best = naive_peak;
    let mut offsets = vec![0usize; live.len()];
    search(&live, &sums, &mut offsets, 0, 0, &mut best);
    Ok(best)
}

fn overlap(a: &TensorLife, b: &TensorLife) -> bool {
    a.start <= b.end && b.start <= a.end
}

fn search(
    items: &[TensorLife],
    candidates: &[usize],
    offsets: &mut [usize],
    idx: usize,
    peak_so_far: usize,
    best: &mut usize,
) {
    if peak_so_far >= *best {
        return; // cannot improve
    }
    if idx == items.len() {
        *best = peak_so_far;
        return;
    }
    let item = &items[idx];
    'cand: for &off in candidates {
        let top = off + item.bytes;
        if top.max(peak_so_far) >= *best {
            break; // candidates ascend; everything further is worse
        }
        for j in 0..idx {
            if overlap(item, &items[j]) {
                let (a0, a1) = (off, top);
                let (b0, b1) = (offsets[j], offsets[j] + items[j].bytes);
                if a0 < b1 && b0 < a1 {
                    continue 'cand;
                }
            }
        }
        offsets[idx] = off;
        search(items, candidates, offsets, idx + 1, peak_so_far.max(top), best);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn life(bytes: usize, start: u32, end: u32) -> TensorLife {
        TensorLife { bytes, start, end }
    }

    #[test]
    fn disjoint_pair_shares_one_slot() {
        let peak = brute_force_arena(&[life(100, 0, 1), life(100, 2, 3)]).unwrap();
        assert_eq!(peak, 100);
    }

    #[test]
    fn overlapping_pair_stacks() {
        let peak = brute_force_arena(&[life(100, 0, 2), life(100, 1, 3)]).unwrap();
        assert_eq!(peak, 200);
    }

    #[test]
    fn refuses_oversized_sets() {
        let items = vec![life(1, 0, 1); 7];
        assert!(brute_force_arena(&items).is_err());
    }

    #[test]
    fn beats_naive_stacking_when_reuse_is_possible() {
        // chain of alternating lifetimes: optimal reuses two slots
        let items = [
            life(10, 0, 1),
            life(10, 1, 2),
            life(10, 2, 3),
            life(10, 3, 4),
        ];
        assert_eq!(brute_force_arena(&items).unwrap(), 20);
    }
}
