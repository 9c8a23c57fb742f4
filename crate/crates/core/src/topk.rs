//! Top-K instance selection by positive-likeness score.

use crate::error::{Error, Result};

/// Indices of the `min(k, n)` highest scores, best first.
///
/// Equal scores keep ascending index order, so the ranking is deterministic
/// and every shorter selection is a prefix of a longer one.
pub fn topk_select(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::param("K", "must be positive"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score at index {i}")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Stable sort on descending score keeps ties in index order.
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k.min(scores.len()));
    Ok(idx)
}

/// Probability that `positives` independent positive cells are all missed by a
/// detector with per-cell recall `recall`.
pub fn all_missed_probability(recall: f64, positives: u32) -> f64 {
    (1.0 - recall).powi(positives as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(topk_select(&[0.9, 0.1, 0.8, 0.7], 3).unwrap(), [0, 2, 3]);
        assert_eq!(topk_select(&[0.5, 0.5], 1).unwrap(), [0]);
        assert_eq!(topk_select(&[0.2, 0.4], 5).unwrap(), [1, 0]);
    }

    #[test]
    fn rejects_zero_k_and_nan() {
        assert!(matches!(topk_select(&[1.0], 0), Err(Error::InvalidParameter { .. })));
        assert!(matches!(topk_select(&[1.0, f64::NAN], 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn miss_rate_of_two_positive_cells() {
        assert!((all_missed_probability(0.989, 2) - 0.000121).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn prefix_stable(scores in proptest::collection::vec(0u8..6, 1..60), k in 1usize..70, k2 in 1usize..70) {
            // small integer scores force plenty of ties
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 5.0).collect();
            let (lo, hi) = (k.min(k2), k.max(k2));
            let short = topk_select(&s, lo).unwrap();
            let long = topk_select(&s, hi).unwrap();
            prop_assert_eq!(&short[..], &long[..short.len()]);
            prop_assert_eq!(long.len(), hi.min(s.len()));
            for w in long.windows(2) {
                prop_assert!(s[w[0]] > s[w[1]] || (s[w[0]] == s[w[1]] && w[0] < w[1]));
            }
        }
    }
}
