use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy against label-smoothed targets.
///
/// The target distribution puts `1 − smoothing` on the true class and
/// `smoothing / K` everywhere. `logits` is `[K]` (one target) or `[B, K]`.
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy_with_label_smoothing(
    logits: &Tensor,
    targets: &[usize],
    smoothing: f64,
) -> Result<(f64, Tensor)> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::input(format!("smoothing must be in [0, 1), got {smoothing}")));
    }
    let (batch, classes) = match *logits.shape() {
        [k] => (1, k),
        [b, k] => (b, k),
        ref s => return Err(Error::input(format!("logits must be 1-D or 2-D, got {s:?}"))),
    };
    if targets.len() != batch {
        return Err(Error::input(format!(
            "{} targets for a batch of {batch}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::input(format!("target class {bad} out of range for {classes} classes")));
    }
    let off = smoothing / classes as f64;
    let mut grad = vec![0.0; batch * classes];
    let mut total = 0.0;
    for (b, &target) in targets.iter().enumerate() {
        let row = &logits.values()[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        for (k, &z) in row.iter().enumerate() {
            let p = if k == target { 1.0 - smoothing + off } else { off };
            let log_softmax = z - log_norm;
            total -= p * log_softmax;
            grad[b * classes + k] = (log_softmax.exp() - p) / batch as f64;
        }
    }
    Ok((total / batch as f64, Tensor::from_vec(logits.shape(), grad)?))
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = *logits.shape().last().unwrap_or(&1);
    logits
        .values()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        for smoothing in [0.0, 0.1] {
            let (loss, _) = cross_entropy_with_label_smoothing(&logits, &[0], smoothing).unwrap();
            assert!((loss - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_direct_formula() {
        let z = [0.3, -1.2, 2.5, 0.7];
        let logits = Tensor::from_vec(&[4], z.to_vec()).unwrap();
        let (loss, _) = cross_entropy_with_label_smoothing(&logits, &[2], 0.1).unwrap();
        // -Σ p_k log softmax_k evaluated directly.
        let denom: f64 = z.iter().map(|v: &f64| v.exp()).sum();
        let p = [0.025, 0.025, 0.925, 0.025];
        let want: f64 = -(0..4).map(|k| p[k] * (z[k].exp() / denom).ln()).sum::<f64>();
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let z = vec![0.5, -0.25, 1.0, 0.1, -2.0, 0.3];
        let logits = Tensor::from_vec(&[2, 3], z.clone()).unwrap();
        let targets = [1, 2];
        let (_, grad) = cross_entropy_with_label_smoothing(&logits, &targets, 0.2).unwrap();
        let eps = 1e-6;
        for i in 0..z.len() {
            let eval = |delta: f64| {
                let mut v = z.clone();
                v[i] += delta;
                let t = Tensor::from_vec(&[2, 3], v).unwrap();
                cross_entropy_with_label_smoothing(&t, &targets, 0.2).unwrap().0
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((fd - grad.values()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_targets() {
        let logits = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            cross_entropy_with_label_smoothing(&logits, &[3], 0.0),
            Err(Error::Input(_))
        ));
        assert!(cross_entropy_with_label_smoothing(&logits, &[0, 1], 0.0).is_err());
    }
}
