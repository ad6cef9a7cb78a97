//! Sensitivity-weighted batched k-means and the color / shape codebooks
//! built on it.
//!
//! Each step samples a batch without replacement, assigns every batch vector
//! to its nearest centroid, computes the sensitivity-weighted mean of each
//! cluster's batch members and blends it into the centroid with a moving
//! average. Assignment by `S(x)·‖x−c‖²` has the same argmin as plain squared
//! distance whenever `S(x) > 0`, so plain distance is used for all vectors;
//! zero-sensitivity vectors carry no weight in the means.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::scene::{eigendecompose_covariance, normalize_covariance, Covariance3, GaussianScene, SceneError};
use crate::sensitivity::split_by_threshold;

/// Dimension of a finalized shape codebook entry: quaternion (4) + unit scale (3).
pub const SHAPE_ENTRY_DIM: usize = 7;
/// Centroids whose trace falls to this level are reseeded from the data.
pub const DEGENERATE_TRACE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("all {0} clustering weights are zero")]
    ZeroWeights(usize),
    #[error("nothing to cluster")]
    Empty,
    #[error("data length {len} is not a multiple of dimension {dim}")]
    Shape { len: usize, dim: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    /// `c ← λ·c + (1−λ)·batch_mean`.
    MovingAverage,
    /// `c ← batch_mean` (plain Lloyd iteration on full batches).
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub k: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub decay: f64,
    pub seed: u64,
    pub update: UpdateRule,
    /// Reseed centroids that attract no batch vector for a whole epoch.
    pub reseed_idle: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig::colors()
    }
}

impl ClusterConfig {
    /// Color codebook defaults: 4096 entries, 100 steps, batches of 2¹⁸.
    pub fn colors() -> Self {
        ClusterConfig { k: 4096, steps: 100, batch_size: 1 << 18, decay: 0.8, seed: 0, update: UpdateRule::MovingAverage, reseed_idle: true }
    }

    /// Shape codebook defaults: 4096 entries, 800 steps, batches of 2²⁰.
    pub fn shapes() -> Self {
        ClusterConfig { steps: 800, batch_size: 1 << 20, ..ClusterConfig::colors() }
    }
}

/// Per-space hooks applied around the centroid update.
pub trait CentroidSpace: Sync {
    /// Projects an updated centroid back onto the space. Returning `false`
    /// marks the centroid degenerate; it is then reseeded from a data vector.
    fn renormalize(&self, _centroid: &mut [f64]) -> bool {
        true
    }

    /// Called with every batch mean before it is blended in.
    fn check_batch_mean(&self, _mean: &[f64]) {}
}

/// Unconstrained Euclidean vectors.
pub struct Euclidean;
impl CentroidSpace for Euclidean {}

/// Unit-trace symmetric matrices stored as `[xx, xy, xz, yy, yz, zz]`.
pub struct UnitTraceCovariance;

impl UnitTraceCovariance {
    pub fn trace(c: &[f64]) -> f64 {
        c[0] + c[3] + c[5]
    }
}

impl CentroidSpace for UnitTraceCovariance {
    fn renormalize(&self, c: &mut [f64]) -> bool {
        let tr = Self::trace(c);
        if !(tr > DEGENERATE_TRACE) {
            return false;
        }
        c.iter_mut().for_each(|v| *v /= tr);
        true
    }

    fn check_batch_mean(&self, mean: &[f64]) {
        // weighted means of unit-trace matrices keep unit trace
        debug_assert!((Self::trace(mean) - 1.0).abs() <= 1e-5, "batch mean trace {}", Self::trace(mean));
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its distance.
pub fn nearest_centroid(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// `Σ S(x)·‖x − c_{a(x)}‖²`.
pub fn weighted_objective(data: &[f64], dim: usize, weights: &[f64], centroids: &[f64], assignments: &[u32]) -> f64 {
    data.chunks_exact(dim)
        .zip(weights)
        .zip(assignments)
        .map(|((x, w), &a)| w * squared_distance(x, &centroids[a as usize * dim..(a as usize + 1) * dim]))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub k: usize,
    pub assignments: Vec<u32>,
}

/// Stepwise weighted k-means. [`weighted_kmeans`] runs it end to end.
pub struct KMeans<'a, S: CentroidSpace> {
    data: &'a [f64],
    dim: usize,
    weights: &'a [f64],
    config: ClusterConfig,
    space: &'a S,
    rng: ChaCha8Rng,
    centroids: Vec<f64>,
    k: usize,
    order: Vec<usize>,
    cursor: usize,
    idle: Vec<usize>,
}

impl<'a, S: CentroidSpace> KMeans<'a, S> {
    /// Validates input and draws the initial centroids uniformly inside the
    /// per-dimension data range.
    pub fn new(data: &'a [f64], dim: usize, weights: &'a [f64], config: &ClusterConfig, space: &'a S) -> Result<Self, ClusterError> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(ClusterError::Shape { len: data.len(), dim });
        }
        let m = data.len() / dim;
        if m == 0 {
            return Err(ClusterError::Empty);
        }
        assert_eq!(weights.len(), m, "one weight per vector");
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(ClusterError::ZeroWeights(m));
        }
        let mut k = config.k.max(1);
        if k > m {
            log::warn!("codebook size {k} exceeds {m} vectors; clamping");
            k = m;
        }
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for x in data.chunks_exact(dim) {
            for d in 0..dim {
                lo[d] = lo[d].min(x[d]);
                hi[d] = hi[d].max(x[d]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut centroids = Vec::with_capacity(k * dim);
        for _ in 0..k {
            for d in 0..dim {
                centroids.push(if hi[d] > lo[d] { rng.gen_range(lo[d]..=hi[d]) } else { lo[d] });
            }
        }
        let mut run = KMeans {
            data,
            dim,
            weights,
            config: config.clone(),
            space,
            rng,
            centroids,
            k,
            order: (0..m).collect(),
            cursor: m,
            idle: vec![0; k],
        };
        run.project_all();
        Ok(run)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    fn population(&self) -> usize {
        self.data.len() / self.dim
    }

    fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn project_all(&mut self) {
        for c in 0..self.k {
            let range = c * self.dim..(c + 1) * self.dim;
            if !self.space.renormalize(&mut self.centroids[range.clone()]) {
                let pick = self.rng.gen_range(0..self.population());
                let v = self.vector(pick).to_vec();
                self.centroids[range].copy_from_slice(&v);
            }
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let m = self.population();
        let b = self.config.batch_size.max(1);
        if b >= m {
            return (0..m).collect();
        }
        if self.cursor + b > m {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        batch
    }

    /// Centroids idle for a full epoch move onto the batch vectors with the
    /// largest weighted distance to their current centroid.
    fn reseed_idle(&mut self, batch: &[usize], assign: &[usize], wsum: &[f64]) {
        let patience = self.population().div_ceil(self.config.batch_size.max(1));
        let dim = self.dim;
        let mut idle = Vec::new();
        for c in 0..self.k {
            if wsum[c] > 0.0 {
                self.idle[c] = 0;
            } else {
                self.idle[c] += 1;
                if self.idle[c] >= patience {
                    idle.push(c);
                }
            }
        }
        if idle.is_empty() {
            return;
        }
        // greedy farthest-point selection so new seeds spread out
        let mut gap: Vec<f64> = batch
            .par_iter()
            .zip(assign)
            .map(|(&i, &a)| self.weights[i] * squared_distance(self.vector(i), &self.centroids[a * dim..(a + 1) * dim]))
            .collect();
        for c in idle {
            let (j, &g) = gap.iter().enumerate().fold((0, &0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if g <= 0.0 {
                break;
            }
            let v = self.vector(batch[j]).to_vec();
            gap.par_iter_mut().zip(batch).for_each(|(gi, &i)| {
                *gi = gi.min(self.weights[i] * squared_distance(&self.data[i * dim..(i + 1) * dim], &v));
            });
            self.centroids[c * dim..(c + 1) * dim].copy_from_slice(&v);
            self.idle[c] = 0;
        }
    }

    /// One sampled assignment + update step.
    pub fn step(&mut self) {
        let batch = self.next_batch();
        let dim = self.dim;
        let assign: Vec<usize> = batch
            .par_iter()
            .map(|&i| nearest_centroid(self.vector(i), &self.centroids, dim).0)
            .collect();
        let mut sums = vec![0.0; self.k * dim];
        let mut wsum = vec![0.0; self.k];
        for (&i, &a) in batch.iter().zip(&assign) {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            wsum[a] += w;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(self.vector(i)) {
                *s += w * x;
            }
        }
        if self.config.reseed_idle {
            self.reseed_idle(&batch, &assign, &wsum);
        }
        let decay = match self.config.update {
            UpdateRule::MovingAverage => self.config.decay,
            UpdateRule::Exact => 0.0,
        };
        for c in 0..self.k {
            if wsum[c] == 0.0 {
                continue;
            }
            let mean: Vec<f64> = sums[c * dim..(c + 1) * dim].iter().map(|s| s / wsum[c]).collect();
            self.space.check_batch_mean(&mean);
            for (cv, mv) in self.centroids[c * dim..(c + 1) * dim].iter_mut().zip(&mean) {
                *cv = decay * *cv + (1.0 - decay) * mv;
            }
        }
        self.project_all();
    }

    /// Nearest-centroid assignment of the whole population.
    pub fn assign_all(&self) -> Vec<u32> {
        (0..self.population())
            .into_par_iter()
            .map(|i| nearest_centroid(self.vector(i), &self.centroids, self.dim).0 as u32)
            .collect()
    }

    /// Sets each listed centroid to the weighted mean of its members.
    fn recenter(&mut self, clusters: &[usize], assignments: &[u32]) {
        let dim = self.dim;
        for &c in clusters {
            let mut sum = vec![0.0; dim];
            let mut wsum = 0.0;
            for (i, &a) in assignments.iter().enumerate() {
                if a as usize == c && self.weights[i] > 0.0 {
                    wsum += self.weights[i];
                    for (s, x) in sum.iter_mut().zip(self.vector(i)) {
                        *s += self.weights[i] * x;
                    }
                }
            }
            if wsum > 0.0 {
                let slot = &mut self.centroids[c * dim..(c + 1) * dim];
                for (cv, s) in slot.iter_mut().zip(&sum) {
                    *cv = s / wsum;
                }
                self.space.renormalize(slot);
            }
        }
    }

    /// Final full assignment. Clusters left without members are reseeded
    /// with the data vectors farthest from their centroids (ties by index);
    /// the clusters that gave up a vector are re-centered on their remaining
    /// members and everything is reassigned.
    pub fn finish(mut self) -> KMeansResult {
        let dim = self.dim;
        let mut assignments = self.assign_all();
        for _ in 0..self.k {
            let mut counts = vec![0usize; self.k];
            for &a in &assignments {
                counts[a as usize] += 1;
            }
            let empty: Vec<usize> = (0..self.k).filter(|&c| counts[c] == 0).collect();
            if empty.is_empty() {
                break;
            }
            let mut far: Vec<(f64, usize)> = (0..self.population())
                .map(|i| {
                    let a = assignments[i] as usize;
                    (squared_distance(self.vector(i), &self.centroids[a * dim..(a + 1) * dim]), i)
                })
                .filter(|&(d, _)| d > 0.0)
                .collect();
            far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut candidates = far.into_iter();
            let mut donors = Vec::new();
            for e in empty {
                let Some((_, i)) = candidates.by_ref().find(|&(_, i)| counts[assignments[i] as usize] > 1) else {
                    break;
                };
                counts[assignments[i] as usize] -= 1;
                counts[e] += 1;
                donors.push(assignments[i] as usize);
                let v = self.vector(i).to_vec();
                self.centroids[e * dim..(e + 1) * dim].copy_from_slice(&v);
            }
            if donors.is_empty() {
                break;
            }
            assignments = self.assign_all();
            self.recenter(&donors, &assignments);
            assignments = self.assign_all();
        }
        KMeansResult { centroids: self.centroids, dim, k: self.k, assignments }
    }
}

/// Weighted k-means in an arbitrary centroid space.
pub fn weighted_kmeans_in<S: CentroidSpace>(
    data: &[f64],
    dim: usize,
    weights: &[f64],
    config: &ClusterConfig,
    space: &S,
) -> Result<KMeansResult, ClusterError> {
    let mut run = KMeans::new(data, dim, weights, config, space)?;
    for _ in 0..config.steps {
        run.step();
    }
    Ok(run.finish())
}

/// Weighted k-means over `M×dim` row-major vectors.
pub fn weighted_kmeans(data: &[f64], dim: usize, weights: &[f64], config: &ClusterConfig) -> Result<KMeansResult, ClusterError> {
    weighted_kmeans_in(data, dim, weights, config, &Euclidean)
}

/// `K_total × dim` table: entries `[0, clustered_count)` are centroids, the
/// rest are retained vectors copied verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Vec<f64>,
    pub dim: usize,
    pub clustered_count: usize,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }
}

/// Clusters `vectors` (rows of `dim`) except those with sensitivity above
/// `beta`, which are appended verbatim. Returns the codebook and one index
/// per row.
fn cluster_with_retention<S: CentroidSpace>(
    vectors: &[f64],
    dim: usize,
    sensitivity: &[f64],
    beta: f64,
    config: &ClusterConfig,
    space: &S,
) -> Result<(Codebook, Vec<u32>), ClusterError> {
    let n = sensitivity.len();
    let all: Vec<usize> = (0..n).collect();
    let (clusterable, retained) = split_by_threshold(&all, sensitivity, beta);
    let mut indices = vec![0u32; n];
    let mut entries = Vec::new();
    let mut clustered_count = 0;
    if !clusterable.is_empty() {
        let mut data = Vec::with_capacity(clusterable.len() * dim);
        for &i in &clusterable {
            data.extend_from_slice(&vectors[i * dim..(i + 1) * dim]);
        }
        let weights: Vec<f64> = clusterable.iter().map(|&i| sensitivity[i]).collect();
        let result = weighted_kmeans_in(&data, dim, &weights, config, space)?;
        for (&i, &a) in clusterable.iter().zip(&result.assignments) {
            indices[i] = a;
        }
        clustered_count = result.k;
        entries = result.centroids;
    }
    for (r, &i) in retained.iter().enumerate() {
        indices[i] = (clustered_count + r) as u32;
        entries.extend_from_slice(&vectors[i * dim..(i + 1) * dim]);
    }
    Ok((Codebook { entries, dim, clustered_count }, indices))
}

#[derive(Debug, Clone)]
pub struct ColorClustering {
    pub codebook: Codebook,
    pub indices: Vec<u32>,
}

/// Color codebook over each Gaussian's full SH vector.
pub fn cluster_colors(
    scene: &GaussianScene,
    sensitivity: &[f64],
    beta_c: f64,
    config: &ClusterConfig,
) -> Result<ColorClustering, ClusterError> {
    let (codebook, indices) =
        cluster_with_retention(&scene.sh, scene.sh_dim(), sensitivity, beta_c, config, &Euclidean)?;
    Ok(ColorClustering { codebook, indices })
}

#[derive(Debug, Clone)]
pub struct ShapeClustering {
    /// Entries are `[qw, qx, qy, qz, ŝ0, ŝ1, ŝ2]` with unit `ŝ`.
    pub codebook: Codebook,
    /// The unit-trace covariances the entries were decomposed from.
    pub normalized: Vec<Covariance3>,
    pub indices: Vec<u32>,
    /// Per-Gaussian scale magnitude η = ‖s‖.
    pub etas: Vec<f64>,
}

/// Shape codebook over trace-normalized covariances. Centroids are
/// renormalized to unit trace after every update and finally decomposed
/// into a rotation and a unit-norm scale.
pub fn cluster_shapes(
    scene: &GaussianScene,
    sensitivity: &[f64],
    beta_g: f64,
    config: &ClusterConfig,
) -> Result<ShapeClustering, ClusterError> {
    let mut vectors = Vec::with_capacity(scene.len() * 6);
    let mut etas = Vec::with_capacity(scene.len());
    for i in 0..scene.len() {
        let (unit, eta) = normalize_covariance(&scene.covariance(i))?;
        vectors.extend_from_slice(&unit.0);
        etas.push(eta);
    }
    let (cov_book, indices) = cluster_with_retention(&vectors, 6, sensitivity, beta_g, config, &UnitTraceCovariance)?;

    let normalized: Vec<Covariance3> =
        cov_book.entries.chunks_exact(6).map(|c| Covariance3(c.try_into().unwrap())).collect();
    let mut entries = Vec::with_capacity(normalized.len() * SHAPE_ENTRY_DIM);
    for cov in &normalized {
        let (q, s) = eigendecompose_covariance(cov);
        let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        entries.extend_from_slice(&q);
        entries.extend(s.iter().map(|v| v / n));
    }
    Ok(ShapeClustering {
        codebook: Codebook { entries, dim: SHAPE_ENTRY_DIM, clustered_count: cov_book.clustered_count },
        normalized,
        indices,
        etas,
    })
}
