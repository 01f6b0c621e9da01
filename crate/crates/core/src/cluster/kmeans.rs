use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl KmeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KmeansConfig {
            k,
            seed,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub points: Vec<Vec<f64>>,
    /// Sum of squared distances to the nearest centroid after the fit.
    pub inertia: f64,
    /// Inertia after initialization and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl Centroids {
    pub fn k(&self) -> usize {
        self.points.len()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        // strict comparison keeps the lowest index on ties
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Index of the Euclidean-nearest centroid; ties go to the lowest index.
pub fn assign(code: &[f64], centroids: &Centroids) -> usize {
    nearest(code, &centroids.points).0
}

fn kmeans_pp<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].as_ref().to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p.as_ref(), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[idx].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign_all<P: AsRef<[f64]>>(points: &[P], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let (k, d) = nearest(p.as_ref(), centroids);
            inertia += d;
            k
        })
        .collect();
    (labels, inertia)
}

/// Lloyd's algorithm from a k-means++ start.
///
/// A cluster that loses all its points is reseeded at the point farthest
/// from its own cluster mean. Inertia is checked after every iteration and
/// an increase beyond rounding is reported as an error.
pub fn kmeans_fit<P: AsRef<[f64]>>(points: &[P], config: &KmeansConfig) -> Result<Centroids> {
    let k = config.k;
    if k == 0 {
        return Err(Error::invalid("kmeans", "k must be at least 1"));
    }
    if points.len() < k {
        return Err(Error::invalid(
            "kmeans",
            format!("{} points cannot form {k} clusters", points.len()),
        ));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim || p.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("kmeans", "points must be finite and of equal length"));
    }
    let mut rng = rng::stream(config.seed, "kmeans++", 0);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let (mut labels, mut inertia) = assign_all(points, &centroids);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < config.max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, &n), old)| {
                if n == 0 {
                    old.clone()
                } else {
                    s.iter().map(|v| v / n as f64).collect()
                }
            })
            .collect();
        let mut taken = vec![false; points.len()];
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| !taken[i])
                .map(|i| (i, dist2(points[i].as_ref(), &next[labels[i]])))
                .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            taken[far.0] = true;
            next[j] = points[far.0].as_ref().to_vec();
        }
        let shift = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let (l, i) = assign_all(points, &centroids);
        if i > inertia * (1.0 + 1e-12) + 1e-300 {
            return Err(Error::invalid(
                "kmeans",
                format!("inertia increased from {inertia} to {i} at iteration {iterations}"),
            ));
        }
        labels = l;
        inertia = i;
        history.push(inertia);
        if shift < config.tol {
            break;
        }
    }
    Ok(Centroids {
        points: centroids,
        inertia,
        inertia_history: history,
        iterations,
        seed: config.seed,
    })
}
