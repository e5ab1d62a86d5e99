//! Small numeric helpers shared across modules.

/// Tolerance for "is this a probability distribution" checks.
pub const STOCHASTIC_TOL: f64 = 1e-9;

const PAIRWISE_BLOCK: usize = 32;

/// Pairwise (cascade) summation. The split points depend only on the
/// slice length, so the result is bit-identical for a given input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean via [`pairwise_sum`]. Returns NaN for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Population variance (divides by `len`).
pub fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    mean(&sq)
}

/// Ratio with the 0/0 = 0 convention. `None` signals a positive numerator
/// over a zero denominator.
pub fn safe_ratio(num: f64, den: f64) -> Option<f64> {
    if den > 0.0 {
        Some(num / den)
    } else if num > 0.0 {
        None
    } else {
        Some(0.0)
    }
}

/// Numerically stable softmax of `logits` scaled by `beta`.
pub fn softmax(logits: &[f64], beta: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| beta * v).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let z = pairwise_sum(&exps);
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_inputs() {
        let v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 45.0);
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0], 0.7);
        let b = softmax(&[101.0, 102.0, 103.0], 0.7);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn ratio_convention() {
        assert_eq!(safe_ratio(0.0, 0.0), Some(0.0));
        assert_eq!(safe_ratio(0.5, 0.0), None);
        assert_eq!(safe_ratio(1.0, 4.0), Some(0.25));
    }
}
