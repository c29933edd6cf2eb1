use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_trials: usize,
    pub sample_size: usize,
    pub seed: u64,
    /// Cap on redraws within one trial when the metric is undefined.
    pub max_redraws: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { n_trials: 2000, sample_size: 2500, seed: 0, max_redraws: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    /// Resamples discarded because the metric was undefined on them.
    pub redraws: usize,
}

/// Linear-interpolated percentile of sorted values, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval (2.5, 97.5) of `metric`.
///
/// Items are first put in the canonical order given by `cmp`, and each
/// trial draws multiplicities from its own `(seed, trial)` stream, so the
/// interval depends only on the multiset of items. Resamples are passed to
/// the metric in canonical order.
pub fn bootstrap_ci<T, M, C>(items: &[T], metric: M, cmp: C, cfg: &BootstrapConfig) -> Result<Interval>
where
    T: Clone + Sync,
    M: Fn(&[T]) -> Result<f64> + Sync,
    C: Fn(&T, &T) -> Ordering,
{
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.n_trials == 0 || cfg.sample_size == 0 {
        return Err(Error::Precondition("bootstrap needs at least one trial and one draw".into()));
    }
    let mut canonical = items.to_vec();
    canonical.sort_by(&cmp);
    let n = canonical.len();
    let results = par::map_range(cfg.n_trials, |trial| -> Result<(f64, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(trial as u64);
        let mut counts = vec![0usize; n];
        for redraw in 0..=cfg.max_redraws {
            counts.iter_mut().for_each(|c| *c = 0);
            for _ in 0..cfg.sample_size {
                counts[rng.random_range(0..n)] += 1;
            }
            let sample: Vec<T> = canonical.iter().zip(&counts).flat_map(|(x, c)| std::iter::repeat_n(x.clone(), *c)).collect();
            if let Ok(v) = metric(&sample) {
                return Ok((v, redraw));
            }
        }
        Err(Error::UndefinedMetric(format!("trial {trial}: metric undefined after {} redraws", cfg.max_redraws)))
    });
    let mut values = Vec::with_capacity(cfg.n_trials);
    let mut redraws = 0;
    for r in results {
        let (v, k) = r?;
        values.push(v);
        redraws += k;
    }
    values.sort_by(f64::total_cmp);
    Ok(Interval { low: percentile(&values, 2.5), high: percentile(&values, 97.5), redraws })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::roc_auc;

    fn cmp_pair(a: &(f64, bool), b: &(f64, bool)) -> Ordering {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    }

    fn auc(items: &[(f64, bool)]) -> Result<f64> {
        let (s, l): (Vec<f64>, Vec<bool>) = items.iter().copied().unzip();
        roc_auc(&s, &l)
    }

    #[test]
    fn constant_metric_gives_point_interval() {
        let cfg = BootstrapConfig { n_trials: 50, sample_size: 10, ..Default::default() };
        let r = bootstrap_ci(&[1, 2, 3], |_| Ok(0.42), |a: &i32, b| a.cmp(b), &cfg).unwrap();
        assert_eq!((r.low, r.high, r.redraws), (0.42, 0.42, 0));
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let items: Vec<(f64, bool)> = (0..60).map(|i| ((i * 37 % 60) as f64 / 60.0, i % 3 == 0)).collect();
        let cfg = BootstrapConfig { n_trials: 200, sample_size: 60, seed: 9, ..Default::default() };
        let a = bootstrap_ci(&items, auc, cmp_pair, &cfg).unwrap();
        let mut rev = items.clone();
        rev.reverse();
        let b = bootstrap_ci(&rev, auc, cmp_pair, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.low <= a.high);
    }

    #[test]
    fn undefined_resamples_are_redrawn() {
        // One positive among many negatives: many resamples miss it.
        let mut items: Vec<(f64, bool)> = (0..30).map(|i| (i as f64, false)).collect();
        items.push((100.0, true));
        let cfg = BootstrapConfig { n_trials: 100, sample_size: 10, seed: 1, max_redraws: 1000 };
        let r = bootstrap_ci(&items, auc, cmp_pair, &cfg).unwrap();
        assert!(r.redraws > 0);
        assert_eq!((r.low, r.high), (1.0, 1.0));
        let capped = BootstrapConfig { max_redraws: 0, ..cfg };
        assert!(bootstrap_ci(&items, auc, cmp_pair, &capped).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert!((percentile(&v, 2.5) - 0.1).abs() < 1e-12);
        assert_eq!(percentile(&v, 100.0), 4.0);
    }
}
