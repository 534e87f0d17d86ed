//! Stage-1 diagnosis: k-means over the (width, height) of the cropped pattern.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RoiCrop;
use crate::CorneaLabel;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("need at least {k} distinct points, found {distinct}")]
    FewerDistinctPointsThanK { distinct: usize, k: usize },
    #[error("cluster count must be at least 1")]
    InvalidK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimFeatures {
    pub scene: String,
    pub width: usize,
    pub height: usize,
}

impl DimFeatures {
    pub fn point(&self) -> [f64; 2] {
        [self.width as f64, self.height as f64]
    }
}

pub fn extract_dims(crop: &RoiCrop, scene: &str) -> DimFeatures {
    DimFeatures {
        scene: scene.to_string(),
        width: crop.bbox.width(),
        height: crop.bbox.height(),
    }
}

/// Per-feature z-score parameters (population standard deviation; a constant
/// feature gets scale 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Standardization {
    pub fn fit(points: &[[f64; 2]]) -> Self {
        let n = points.len().max(1) as f64;
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for d in 0..2 {
            mean[d] = points.iter().map(|p| p[d]).sum::<f64>() / n;
            let var = points.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n;
            std[d] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.mean[0]) / self.std[0],
            (p[1] - self.mean[1]) / self.std[1],
        ]
    }

    pub fn invert(&self, z: [f64; 2]) -> [f64; 2] {
        [
            z[0] * self.std[0] + self.mean[0],
            z[1] * self.std[1] + self.mean[1],
        ]
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn count_distinct(points: &[[f64; 2]]) -> usize {
    let mut sorted: Vec<_> = points.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    sorted.dedup();
    sorted.len()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: &[[f64; 2]], p: [f64; 2]) -> (usize, f64) {
    let mut best = (0, dist2(centroids[0], p));
    for (i, &c) in centroids.iter().enumerate().skip(1) {
        let d = dist2(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Selection probabilities `d²(x, C) / Σ d²(x_j, C)` for the next seed.
/// Returns `None` when every point coincides with a chosen centroid.
pub fn kmeanspp_weights(points: &[[f64; 2]], chosen: &[[f64; 2]]) -> Option<Vec<f64>> {
    let d: Vec<f64> = points.iter().map(|&p| nearest(chosen, p).1).collect();
    let total: f64 = d.iter().sum();
    (total > 0.0).then(|| d.iter().map(|v| v / total).collect())
}

/// k-means++ seeding: the first centroid uniformly, then each next one with
/// probability proportional to the squared distance to the nearest seed.
pub fn kmeanspp_init<R: Rng>(
    points: &[[f64; 2]],
    k: usize,
    rng: &mut R,
) -> Result<Vec<[f64; 2]>, ClassifyError> {
    if k == 0 {
        return Err(ClassifyError::InvalidK);
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(ClassifyError::FewerDistinctPointsThanK { distinct, k });
    }
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    while centroids.len() < k {
        let weights = kmeanspp_weights(points, &centroids).expect("distinct points remain");
        let pick = WeightedIndex::new(&weights).expect("valid weights");
        centroids.push(points[pick.sample(rng)]);
    }
    Ok(centroids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 2,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydResult {
    pub centroids: Vec<[f64; 2]>,
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

fn assign(points: &[[f64; 2]], centroids: &[[f64; 2]]) -> (Vec<usize>, f64) {
    let mut sse = 0.0;
    let labels = points
        .iter()
        .map(|&p| {
            let (i, d) = nearest(centroids, p);
            sse += d;
            i
        })
        .collect();
    (labels, sse)
}

/// Lloyd iterations from the given seeds. An empty cluster is reseeded with
/// the point farthest from its assigned centroid.
pub fn lloyd(points: &[[f64; 2]], init: Vec<[f64; 2]>, params: &KMeansParams) -> LloydResult {
    let k = init.len();
    let mut centroids = init;
    let (mut labels, sse) = assign(points, &centroids);
    let mut sse_history = vec![sse];
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                next[j] = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = points
                    .iter()
                    .zip(&labels)
                    .map(|(&p, &l)| dist2(p, next[l]))
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .expect("non-empty points");
                next[j] = points[far];
                counts[labels[far]] -= 1;
                labels[far] = j;
                counts[j] = 1;
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(&a, &b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let (new_labels, sse) = assign(points, &centroids);
        sse_history.push(sse);
        let stable = new_labels == labels;
        labels = new_labels;
        if stable || shift < params.tol {
            break;
        }
    }
    LloydResult {
        centroids,
        assignments: labels,
        sse_history,
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    /// Centroids in standardized feature space.
    pub centroids: Vec<[f64; 2]>,
    pub standardization: Standardization,
    /// Centroid index to cornea label; the tallest centroid is kc.
    pub label_map: Vec<CorneaLabel>,
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: KMeansModel,
    pub assignments: Vec<usize>,
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

/// Standardize, seed with k-means++ and run Lloyd iterations.
pub fn fit_kmeans<R: Rng>(
    points: &[[f64; 2]],
    params: &KMeansParams,
    rng: &mut R,
) -> Result<KMeansFit, ClassifyError> {
    if params.k == 0 {
        return Err(ClassifyError::InvalidK);
    }
    let distinct = count_distinct(points);
    if distinct < params.k {
        return Err(ClassifyError::FewerDistinctPointsThanK {
            distinct,
            k: params.k,
        });
    }
    let standardization = Standardization::fit(points);
    let z: Vec<_> = points.iter().map(|&p| standardization.apply(p)).collect();
    let init = kmeanspp_init(&z, params.k, rng)?;
    let run = lloyd(&z, init, params);
    let tallest = run
        .centroids
        .iter()
        .enumerate()
        .max_by(|a, b| {
            let ha = standardization.invert(*a.1)[1];
            let hb = standardization.invert(*b.1)[1];
            // Prefer the lower index on equal heights.
            ha.total_cmp(&hb).then(b.0.cmp(&a.0))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let label_map = (0..params.k)
        .map(|i| {
            if i == tallest {
                CorneaLabel::Kc
            } else {
                CorneaLabel::Control
            }
        })
        .collect();
    Ok(KMeansFit {
        model: KMeansModel {
            k: params.k,
            centroids: run.centroids,
            standardization,
            label_map,
        },
        assignments: run.assignments,
        sse_history: run.sse_history,
        iterations: run.iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorneaCall {
    pub label: CorneaLabel,
    pub centroid: usize,
    /// Standardized distance to the assigned centroid.
    pub margin: f64,
}

pub fn classify_cornea(model: &KMeansModel, dims: &DimFeatures) -> CorneaCall {
    let z = model.standardization.apply(dims.point());
    let (centroid, d2) = nearest(&model.centroids, z);
    CorneaCall {
        label: model.label_map[centroid],
        centroid,
        margin: d2.sqrt(),
    }
}
