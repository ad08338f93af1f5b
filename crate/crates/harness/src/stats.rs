//! Percentiles over raw samples.

use serde::{Deserialize, Serialize};

/// Nearest-rank percentile of `samples` (any order). `None` when empty.
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        Self {
            count: samples.len(),
            p50_ms: percentile(samples, 50.0).unwrap_or_default(),
            p95_ms: percentile(samples, 95.0).unwrap_or_default(),
            min_ms: samples.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nearest_rank() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&s, 50.0), Some(50.0));
        assert_eq!(percentile(&s, 95.0), Some(95.0));
        assert_eq!(percentile(&s, 100.0), Some(100.0));
        assert_eq!(percentile(&s, 0.0), Some(1.0));
        assert_eq!(percentile(&[7.0], 95.0), Some(7.0));
        assert_eq!(percentile(&[], 50.0), None);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), Some(2.0));
    }

    proptest! {
        #[test]
        fn percentile_is_a_sample_with_enough_mass_below(
            s in prop::collection::vec(0.0f64..1e6, 1..200),
            p in 0.0f64..=100.0,
        ) {
            let v = percentile(&s, p).unwrap();
            prop_assert!(s.contains(&v));
            let at_or_below = s.iter().filter(|x| **x <= v).count() as f64;
            prop_assert!(at_or_below >= (p / 100.0) * s.len() as f64);
            let below = s.iter().filter(|x| **x < v).count() as f64;
            prop_assert!(below < ((p / 100.0) * s.len() as f64).max(1.0));
        }

        #[test]
        fn summary_is_ordered(s in prop::collection::vec(0.0f64..1e6, 1..200)) {
            let m = Summary::of(&s);
            prop_assert!(m.min_ms <= m.p50_ms && m.p50_ms <= m.p95_ms && m.p95_ms <= m.max_ms);
            let eps = 1e-9 * m.max_ms.max(1.0);
            prop_assert!(m.min_ms - eps <= m.mean_ms && m.mean_ms <= m.max_ms + eps);
        }
    }
}
