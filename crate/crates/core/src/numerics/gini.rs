use crate::error::{Error, Result};

/// Gini coefficient `sum_ij |v_i - v_j| / (2 n^2 mean)` of nonnegative values.
///
/// Evaluated with the sorted-rank identity, which gives the same value as the
/// pairwise sum in `O(n log n)`.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("gini of an empty sequence"));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::domain("gini requires finite nonnegative values"));
    }
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return Err(Error::domain("gini of an all-zero sequence"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // sum_ij |v_i - v_j| = 2 sum_k (2k - n + 1) v_(k), zero-based ranks
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, v)| (2.0 * k as f64 - n + 1.0) * v)
        .sum();
    Ok(weighted / (n * total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(values: &[f64]) -> f64 {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut acc = 0.0;
        for a in values {
            for b in values {
                acc += (a - b).abs();
            }
        }
        acc / (2.0 * n * n * mean)
    }

    #[test]
    fn reference_values() {
        assert_eq!(gini(&[0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert!((gini(&[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((gini(&[1.0, 0.0, 0.0, 0.0]).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(gini(&[]).is_err());
        assert!(gini(&[0.0, 0.0]).is_err());
        assert!(gini(&[1.0, -0.5]).is_err());
    }

    proptest! {
        #[test]
        fn matches_pairwise_formula(v in prop::collection::vec(0.0f64..5.0, 1..40)) {
            prop_assume!(v.iter().sum::<f64>() > 0.0);
            prop_assert!((gini(&v).unwrap() - pairwise(&v)).abs() < 1e-12);
        }

        #[test]
        fn scale_invariant(v in prop::collection::vec(0.01f64..5.0, 1..40), c in 0.001f64..1000.0) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((gini(&v).unwrap() - gini(&scaled).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn lies_in_unit_interval(v in prop::collection::vec(0.0f64..5.0, 1..40)) {
            prop_assume!(v.iter().sum::<f64>() > 0.0);
            let g = gini(&v).unwrap();
            prop_assert!((0.0..1.0).contains(&g));
        }
    }
}
