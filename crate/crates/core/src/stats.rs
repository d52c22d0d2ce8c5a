//! Rank correlation and bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Ranks starting at 1, tied values sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::UndefinedMetric("NaN in ranked vector".into()));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        // -0.0 and 0.0 tie
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    Ok(ranks)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman rank correlation with average ranks for ties.
///
/// A constant input has no rank variance and yields
/// [`Error::UndefinedMetric`].
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_len("spearman input", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "spearman needs at least 2 pairs, got {}",
            a.len()
        )));
    }
    let ra = average_ranks(a)?;
    let rb = average_ranks(b)?;
    pearson(&ra, &rb).ok_or_else(|| Error::UndefinedMetric("zero rank variance".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

pub const DEFAULT_RESAMPLES: usize = 1000;

/// Linear interpolation between order statistics of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap of an arbitrary statistic over resampled indices
/// `0..n`. The statistic receives the resampled index list.
pub fn bootstrap_ci<F>(n: usize, resamples: usize, level: f64, seed: u64, stat: F) -> Result<ConfidenceInterval>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if n == 0 || resamples == 0 {
        return Err(Error::UndefinedMetric("bootstrap over an empty sample".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} not in (0, 1)")));
    }
    let all: Vec<usize> = (0..n).collect();
    let estimate = stat(&all)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0; n];
    let mut draws = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for k in idx.iter_mut() {
            *k = rng.random_range(0..n);
        }
        match stat(&idx) {
            Ok(v) => draws.push(v),
            // degenerate resamples (e.g. all ties) are skipped
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if draws.is_empty() {
        return Err(Error::UndefinedMetric("every bootstrap resample was degenerate".into()));
    }
    draws.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(ConfidenceInterval {
        estimate,
        lower: quantile_sorted(&draws, alpha),
        upper: quantile_sorted(&draws, 1.0 - alpha),
        level,
    })
}

/// Bootstrap interval for the mean of `values`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<ConfidenceInterval> {
    bootstrap_ci(values.len(), resamples, level, seed, |idx| {
        Ok(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8);
        assert_eq!(spearman(&[0.1, 0.5, 0.3], &[0.1, 0.5, 0.3]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 5.0]).unwrap(), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn constant_vector_is_undefined() {
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn bootstrap_is_seeded_and_brackets_the_mean() {
        let v: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = bootstrap_mean_ci(&v, DEFAULT_RESAMPLES, 0.95, 3).unwrap();
        let b = bootstrap_mean_ci(&v, DEFAULT_RESAMPLES, 0.95, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.lower < a.estimate && a.estimate < a.upper);
    }

    #[test]
    fn bootstrap_of_constant_is_degenerate_interval() {
        let ci = bootstrap_mean_ci(&[0.5; 10], 200, 0.95, 0).unwrap();
        assert_eq!((ci.lower, ci.estimate, ci.upper), (0.5, 0.5, 0.5));
    }

    proptest! {
        #[test]
        fn invariant_under_increasing_transform(
            xs in prop::collection::vec(-10.0f64..10.0, 3..40),
            ys in prop::collection::vec(-10.0f64..10.0, 40),
        ) {
            let ys = &ys[..xs.len()];
            if let Ok(r) = spearman(&xs, ys) {
                let tx: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0 * x).collect();
                prop_assert_eq!(spearman(&tx, ys).unwrap(), r);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn symmetric(xs in prop::collection::vec(-5.0f64..5.0, 2..30), seed in 0u64..100) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * ((i as u64 + seed) % 7) as f64).collect();
            match (spearman(&xs, &ys), spearman(&ys, &xs)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-15),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }
    }
}
