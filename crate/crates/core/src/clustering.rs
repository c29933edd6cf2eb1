//! Mini-batch k-means for per-class subtype centers, and the distances the
//! OpenMax calibration is built on.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CenterSet {
    pub centers: Vec<Vec<f64>>,
}

impl CenterSet {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Precondition("a center set needs at least one center".into()));
        }
        let d = centers[0].len();
        for c in &centers {
            if c.len() != d {
                return Err(Error::DimensionMismatch { expected: d, found: c.len() });
            }
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::Precondition("non-finite center".into()));
            }
        }
        Ok(CenterSet { centers })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// Concatenation of several center sets (used for "all other classes").
    pub fn merged<'a>(sets: impl IntoIterator<Item = &'a CenterSet>) -> Result<CenterSet> {
        CenterSet::new(sets.into_iter().flat_map(|s| s.centers.iter().cloned()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Sum of squared distances to the nearest center.
pub fn objective(data: &[Vec<f64>], centers: &CenterSet) -> f64 {
    data.iter().map(|x| nearest(x, &centers.centers).1).sum()
}

fn kmeans_plus_plus(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![data[first].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| squared_distance(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().enumerate().filter(|(i, _)| !chosen[*i]).map(|(_, d)| d).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                if chosen[i] || *d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < *d {
                    break;
                }
                target -= d;
            }
            pick.expect("positive total implies a candidate")
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen[*i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centers.push(data[pick].clone());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(x, &data[pick]));
        }
    }
    centers
}

/// Moves every center that owns no point to the point farthest from its
/// center inside the currently largest cluster.
fn repair_empty(data: &[Vec<f64>], centers: &mut [Vec<f64>]) {
    loop {
        let assign: Vec<(usize, f64)> = data.iter().map(|x| nearest(x, centers)).collect();
        let mut sizes = vec![0usize; centers.len()];
        for (c, _) in &assign {
            sizes[*c] += 1;
        }
        let Some(empty) = sizes.iter().position(|s| *s == 0) else {
            return;
        };
        let largest = (0..sizes.len()).max_by_key(|i| (sizes[*i], usize::MAX - i)).unwrap();
        if sizes[largest] < 2 {
            return;
        }
        let far = assign
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| *c == largest)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        centers[empty] = data[far].clone();
    }
}

/// Mini-batch k-means with k-means++ seeding and per-center `1/count`
/// learning rates. When `batch >= data.len()` every epoch is a full Lloyd
/// step (counts restart each epoch), so the objective never increases.
pub fn minibatch_kmeans(data: &[Vec<f64>], cfg: &KMeansConfig) -> Result<CenterSet> {
    let n = data.len();
    if cfg.k == 0 {
        return Err(Error::Precondition("k must be positive".into()));
    }
    if cfg.k > n {
        return Err(Error::Precondition(format!("k = {} exceeds {} data points", cfg.k, n)));
    }
    let dim = data[0].len();
    for x in data {
        if x.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: x.len() });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = kmeans_plus_plus(data, cfg.k, &mut rng);
    let full_batch = cfg.batch >= n;
    let batch = cfg.batch.clamp(1, n);
    let mut counts = vec![0u64; cfg.k];
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.epochs.max(1) {
        if full_batch {
            counts.iter_mut().for_each(|c| *c = 0);
        } else {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let assigned: Vec<usize> = chunk.iter().map(|&i| nearest(&data[i], &centers).0).collect();
            for (&i, &c) in chunk.iter().zip(&assigned) {
                counts[c] += 1;
                let eta = 1.0 / counts[c] as f64;
                for (cv, xv) in centers[c].iter_mut().zip(&data[i]) {
                    *cv += eta * (xv - *cv);
                }
            }
        }
        repair_empty(data, &mut centers);
    }
    CenterSet::new(centers)
}

/// Euclidean distance to the nearest center.
pub fn min_distance(x: &[f64], c: &CenterSet) -> Result<f64> {
    if x.len() != c.dim() {
        return Err(Error::DimensionMismatch { expected: c.dim(), found: x.len() });
    }
    Ok(nearest(x, &c.centers).1.sqrt())
}

/// `sqrt(min_distance(x, own)^2 + (1 - min_distance(x, others))^2)`.
pub fn composite_distance(x: &[f64], own: &CenterSet, others: &CenterSet) -> Result<f64> {
    let d_own = min_distance(x, own)?;
    let d_other = min_distance(x, others)?;
    Ok(composite_from_parts(d_own, d_other))
}

pub fn composite_from_parts(d_own: f64, d_other: f64) -> f64 {
    (d_own * d_own + (1.0 - d_other) * (1.0 - d_other)).sqrt()
}

/// Scales `x` to unit Euclidean norm (zero vectors are left unchanged).
pub fn unit_normalize(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter().map(|v| v / norm).collect()
    } else {
        x.to_vec()
    }
}
