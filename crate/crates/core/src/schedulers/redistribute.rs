//! Integer apportionment of regrowth budgets across layers.

/// Splits `total` units across layers in proportion to `weights`, never giving
/// a layer more than its `capacity`.
///
/// Layers whose proportional share would exceed capacity are pinned at
/// capacity and the excess is re-split among the rest. The remaining real
/// quotas are rounded with the largest-remainder method, ties to the lower
/// layer index. If the capacities cannot absorb `total`, every layer is
/// filled and the result sums to `Σ capacity`.
pub fn apportion(total: usize, weights: &[f64], capacity: &[usize]) -> Vec<usize> {
    assert_eq!(weights.len(), capacity.len());
    let n = weights.len();
    let cap_sum: usize = capacity.iter().sum();
    if total >= cap_sum {
        return capacity.to_vec();
    }
    let mut pinned = vec![false; n];
    let mut out = vec![0usize; n];
    for l in 0..n {
        if capacity[l] == 0 || weights[l] <= 0.0 || !weights[l].is_finite() {
            pinned[l] = true;
        }
    }
    let open_weight = |pinned: &[bool]| -> f64 {
        (0..n).filter(|&l| !pinned[l]).map(|l| weights[l]).sum()
    };
    if open_weight(&pinned) == 0.0 {
        // No usable proportions: fill by capacity order.
        let mut left = total;
        for l in 0..n {
            let take = left.min(capacity[l]);
            out[l] = take;
            left -= take;
        }
        return out;
    }
    let mut remaining = total as f64;
    let quotas = loop {
        let w = open_weight(&pinned);
        let mut newly = false;
        let q: Vec<f64> = (0..n)
            .map(|l| if pinned[l] { 0.0 } else { remaining * weights[l] / w })
            .collect();
        for l in 0..n {
            if !pinned[l] && q[l] >= capacity[l] as f64 {
                pinned[l] = true;
                out[l] = capacity[l];
                remaining -= capacity[l] as f64;
                newly = true;
            }
        }
        if !newly || open_weight(&pinned) == 0.0 {
            break q;
        }
    };
    let open: Vec<usize> = (0..n).filter(|&l| !pinned[l]).collect();
    let assigned: usize = out.iter().sum();
    let mut left = total - assigned;
    let mut fractional: Vec<(f64, usize)> = Vec::with_capacity(open.len());
    for &l in &open {
        let floor = (quotas[l].floor() as usize).min(capacity[l]).min(left);
        out[l] = floor;
        left -= floor;
        fractional.push((quotas[l] - quotas[l].floor(), l));
    }
    fractional.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    // Largest remainders first; loop again in case rounding left units over.
    while left > 0 {
        let before = left;
        for &(_, l) in &fractional {
            if left == 0 {
                break;
            }
            if out[l] < capacity[l] {
                out[l] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    if left > 0 {
        for l in 0..n {
            let room = capacity[l] - out[l];
            let take = room.min(left);
            out[l] += take;
            left -= take;
        }
    }
    out
}

/// Mean absolute value of `signal` over positions where `active` is set.
pub fn mean_abs_over_active(signal: &[f64], active: &[bool]) -> f64 {
    let (sum, count) = signal
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v.abs(), c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_proportion() {
        assert_eq!(apportion(40, &[0.3, 0.1], &[100, 100]), vec![30, 10]);
    }

    #[test]
    fn equal_weights_split_evenly() {
        assert_eq!(apportion(9, &[1.0, 1.0, 1.0], &[10, 10, 10]), vec![3, 3, 3]);
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0], &[10, 10, 10]), vec![4, 3, 3]);
    }

    #[test]
    fn capacity_overflow_is_redistributed() {
        // Layer 0 would get 45 but only holds 20; the rest splits 25/15.
        let out = apportion(60, &[0.75, 0.25, 0.0], &[20, 100, 5]);
        assert_eq!(out, vec![20, 40, 0]);
        assert_eq!(apportion(60, &[0.5, 0.3, 0.2], &[20, 30, 5]), vec![20, 30, 5]);
    }

    #[test]
    fn three_layer_hand_apportionment() {
        // Quotas 50·{0.2, 0.5, 0.3}/1.0 = 10, 25, 15.
        assert_eq!(apportion(50, &[0.2, 0.5, 0.3], &[50, 50, 50]), vec![10, 25, 15]);
        // 7·{1, 2, 4}/7 = 1, 2, 4 exactly; 8 adds the largest remainder.
        assert_eq!(apportion(8, &[1.0, 2.0, 4.0], &[9, 9, 9]), vec![1, 2, 5]);
    }

    #[test]
    fn mean_over_active_only() {
        let v = [1.0, -3.0, 100.0];
        assert_eq!(mean_abs_over_active(&v, &[true, true, false]), 2.0);
        assert_eq!(mean_abs_over_active(&v, &[false, false, false]), 0.0);
    }
}
