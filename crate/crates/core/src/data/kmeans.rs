//! k-means codebook: k-means++ seeding followed by Lloyd iterations.

use std::collections::HashSet;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{SeedStreams, Stream};
use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub codebook: Mat<f32>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub assignments: Vec<usize>,
}

fn dist2(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &c)| (x as f64 - c).powi(2)).sum()
}

fn distinct_count(points: &[Vec<f32>]) -> usize {
    let set: HashSet<Vec<u32>> = points
        .iter()
        .map(|p| p.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect())
        .collect();
    set.len()
}

/// Nearest centroid, lowest index on ties.
fn assign(points: &[Vec<f32>], centroids: &[Vec<f64>], out: &mut [usize], d: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (k, c) in centroids.iter().enumerate() {
            let dk = dist2(p, c);
            if dk < best.0 {
                best = (dk, k);
            }
        }
        out[i] = best.1;
        d[i] = best.0;
        total += best.0;
    }
    total
}

pub fn train_codebook(points: &[Vec<f32>], k: usize, iterations: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Config("codebook size must be positive".into()));
    }
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("patch vectors have differing lengths".into()));
    }
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Data("non-finite value in codebook training patches".into()));
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(Error::Data(format!(
            "codebook size {k} exceeds the {distinct} distinct patches available"
        )));
    }
    let mut rng = SeedStreams::new(seed).rng(Stream::Codebook, 0);
    let n = points.len();
    let to64 = |p: &Vec<f32>| p.iter().map(|&v| v as f64).collect::<Vec<f64>>();

    // k-means++: first center uniform, then proportional to squared distance.
    let mut centroids = vec![to64(&points[rng.random_range(0..n)])];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = n;
        for (i, &di) in d.iter().enumerate() {
            if di > 0.0 {
                pick = i;
                if r < di {
                    break;
                }
                r -= di;
            }
        }
        let c = to64(&points[pick]);
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, &c));
        }
        centroids.push(c);
    }

    let mut assignments = vec![0usize; n];
    let mut objective = vec![assign(points, &centroids, &mut assignments, &mut d)];
    for _ in 0..iterations {
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, &v)| *s += v as f64);
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Reseed on the point farthest from its current centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| d[a].total_cmp(&d[b]).then(b.cmp(&a)))
                    .unwrap();
                taken[far] = true;
                d[far] = 0.0;
                centroids[c] = to64(&points[far]);
            }
        }
        let obj = assign(points, &centroids, &mut assignments, &mut d);
        let converged = obj == *objective.last().unwrap();
        objective.push(obj);
        if converged {
            break;
        }
    }
    let codebook = Mat::from_fn(k, dim, |r, c| centroids[r][c] as f32);
    Ok(KMeansResult { codebook, objective, assignments })
}
