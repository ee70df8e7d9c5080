//! Per-layer drop and grow primitives.
//!
//! These only touch the mask; zeroing weights and momentum at changed
//! positions is the caller's job.

use rand::Rng;

use crate::sparsity::LayerMask;

/// Outcome of a growth request.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Growth {
    /// Newly activated flat indices, ascending.
    pub grown: Vec<usize>,
    /// How many of the requested weights could not be grown.
    pub shortfall: usize,
}

/// Number of weights removed when pruning fraction `f` of `active` weights.
pub fn drop_count_for(active: usize, fraction: f64) -> usize {
    ((fraction * active as f64).floor() as usize).min(active)
}

/// Deactivates the `floor(f·k_l)` active weights of smallest magnitude.
/// Ties go to the lowest flat index. Returns the removed indices, ascending.
pub fn drop_smallest(weights: &[f64], mask: &mut LayerMask, fraction: f64) -> Vec<usize> {
    let count = drop_count_for(mask.active_count(), fraction);
    drop_smallest_n(weights, mask, count)
}

/// Deactivates exactly `count` (capped at k_l) smallest-magnitude active weights.
pub fn drop_smallest_n(weights: &[f64], mask: &mut LayerMask, count: usize) -> Vec<usize> {
    let active = mask.active_indices();
    let mut chosen = smallest_by(&active, count, |i| weights[i].abs());
    for &i in &chosen {
        mask.deactivate(i);
    }
    chosen.sort_unstable();
    chosen
}

/// Activates the `k` inactive positions with the largest `|score|`
/// (gradient for RigL, momentum for SNFS). Ties go to the lowest flat index.
pub fn grow_by_score(scores: &[f64], mask: &mut LayerMask, k: usize) -> Growth {
    let inactive = mask.inactive_indices();
    let shortfall = k.saturating_sub(inactive.len());
    let mut chosen = smallest_by(&inactive, k, |i| -scores[i].abs());
    for &i in &chosen {
        mask.activate(i);
    }
    chosen.sort_unstable();
    Growth {
        grown: chosen,
        shortfall,
    }
}

/// RigL growth: largest absolute dense gradient among inactive weights.
pub fn grow_by_gradient(grads: &[f64], mask: &mut LayerMask, k: usize) -> Growth {
    grow_by_score(grads, mask, k)
}

/// SET growth: `k` inactive positions uniformly at random without replacement.
pub fn grow_random<R: Rng + ?Sized>(mask: &mut LayerMask, k: usize, rng: &mut R) -> Growth {
    let inactive = mask.inactive_indices();
    let take = k.min(inactive.len());
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, inactive.len(), take)
        .into_iter()
        .map(|j| inactive[j])
        .collect();
    for &i in &chosen {
        mask.activate(i);
    }
    chosen.sort_unstable();
    Growth {
        grown: chosen,
        shortfall: k - take,
    }
}

/// The `count` candidates with the smallest key, ordered by (key, index).
fn smallest_by(candidates: &[usize], count: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let count = count.min(candidates.len());
    if count == 0 {
        return Vec::new();
    }
    let mut keyed: Vec<(f64, usize)> = candidates.iter().map(|&i| (key(i), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if count < keyed.len() {
        keyed.select_nth_unstable_by(count - 1, cmp);
        keyed.truncate(count);
    }
    keyed.sort_unstable_by(cmp);
    keyed.into_iter().map(|(_, i)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn drops_smallest_magnitudes() {
        let w = [0.01, -0.5, 0.3, -0.02];
        let mut mask = LayerMask::dense("l", &[4]);
        assert_eq!(drop_smallest(&w, &mut mask, 0.5), vec![0, 3]);
        assert_eq!(mask.active_count(), 2);
        assert!(drop_smallest(&w, &mut mask, 0.0).is_empty());
    }

    #[test]
    fn drop_ties_prefer_low_index() {
        let w = [0.1, -0.1, 0.1, 0.2];
        let mut mask = LayerMask::dense("l", &[4]);
        assert_eq!(drop_smallest_n(&w, &mut mask, 2), vec![0, 1]);
    }

    #[test]
    fn grows_largest_inactive_gradients() {
        // Inactive positions 1, 2, 4 carry gradients 0.5, -0.7, 0.1.
        let g = [9.0, 0.5, -0.7, 9.0, 0.1];
        let mut mask = LayerMask::from_active("l", &[5], &[0, 3]).unwrap();
        let growth = grow_by_gradient(&g, &mut mask, 2);
        assert_eq!(growth.grown, vec![1, 2]);
        assert_eq!(growth.shortfall, 0);
        assert!(grow_by_gradient(&g, &mut mask, 0).grown.is_empty());
    }

    #[test]
    fn growth_shortfall_is_reported() {
        let mut mask = LayerMask::from_active("l", &[3], &[0]).unwrap();
        let growth = grow_by_gradient(&[0.0; 3], &mut mask, 5);
        assert_eq!(growth.grown, vec![1, 2]);
        assert_eq!(growth.shortfall, 3);
    }

    #[test]
    fn random_growth_fills_when_asked_for_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mask = LayerMask::from_active("l", &[6], &[2]).unwrap();
        let growth = grow_random(&mut mask, 5, &mut rng);
        assert_eq!(growth.grown, vec![0, 1, 3, 4, 5]);
        assert_eq!(mask.active_count(), 6);
        assert!(grow_random(&mut mask, 0, &mut rng).grown.is_empty());
    }
}
