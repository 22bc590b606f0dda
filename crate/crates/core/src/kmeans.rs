// SPDX-License-Identifier: Apache-2.0

//! Lloyd's k-means under squared L2, shared by the PQ codebooks and the IVF
//! coarse quantizer.
//!
//! Centroids start at distinct training points, so when `k` is at least the
//! number of distinct points every point ends up with zero error. Empty
//! clusters are re-seeded with the points farthest from their centroids. The
//! objective recorded after each assignment step never increases.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metric::squared_l2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
    /// Training points are subsampled to at most this many.
    pub max_points: usize,
    pub exec: Exec,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        KMeansConfig {
            k,
            iters: 25,
            seed: 0,
            max_points: 5_000_000,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    pub centroids: Vec<f32>,
    /// Objective (sum of squared distances) after every assignment step.
    pub trace: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Index and distance of the nearest centroid; ties go to the lower index.
    pub fn nearest(&self, v: &[f32]) -> (usize, f32) {
        nearest(&self.centroids, self.dim, v)
    }

    pub fn assign(&self, data: &[f32], exec: Exec) -> Vec<u32> {
        assign(&self.centroids, self.dim, data, exec)
            .into_iter()
            .map(|(c, _)| c)
            .collect()
    }
}

pub(crate) fn nearest(centroids: &[f32], dim: usize, v: &[f32]) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(centroids: &[f32], dim: usize, data: &[f32], exec: Exec) -> Vec<(u32, f32)> {
    let n = data.len() / dim;
    let mut out = vec![(0u32, 0f32); n];
    const CHUNK: usize = 1024;
    exec.for_each_chunk_mut(&mut out, CHUNK, |ci, chunk| {
        for (j, slot) in chunk.iter_mut().enumerate() {
            let i = ci * CHUNK + j;
            let (c, d) = nearest(centroids, dim, &data[i * dim..(i + 1) * dim]);
            *slot = (c as u32, d);
        }
    });
    out
}

/// Trains `cfg.k` centroids on the row-major `data`.
pub fn train(data: &[f32], dim: usize, cfg: &KMeansConfig) -> Result<KMeans> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::InvalidConfig(format!(
            "k-means data length {} is not a multiple of dim {dim}",
            data.len()
        )));
    }
    let n_all = data.len() / dim;
    if n_all == 0 {
        return Err(Error::InvalidConfig("k-means needs at least one point".into()));
    }
    if cfg.k == 0 {
        return Err(Error::InvalidConfig("k-means needs k >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let sampled;
    let data = if n_all > cfg.max_points {
        let mut idx = rand::seq::index::sample(&mut rng, n_all, cfg.max_points).into_vec();
        idx.sort_unstable();
        sampled = idx
            .iter()
            .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
            .collect::<Vec<f32>>();
        &sampled[..]
    } else {
        data
    };
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    // Distinct-point initialization.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut chosen = Vec::with_capacity(cfg.k);
    for &i in &order {
        if chosen.len() == cfg.k {
            break;
        }
        if seen.insert(row(i).iter().map(|x| x.to_bits()).collect()) {
            chosen.push(i);
        }
    }
    let distinct = chosen.len();
    let mut centroids = Vec::with_capacity(cfg.k * dim);
    for j in 0..cfg.k {
        centroids.extend_from_slice(row(chosen[j % distinct]));
    }

    let mut trace = Vec::with_capacity(cfg.iters + 1);
    let mut prev: Option<Vec<u32>> = None;
    for _ in 0..cfg.iters.max(1) {
        let assigned = assign(&centroids, dim, data, cfg.exec);
        trace.push(assigned.iter().map(|a| a.1 as f64).sum());
        let labels: Vec<u32> = assigned.iter().map(|a| a.0).collect();
        if prev.as_ref() == Some(&labels) {
            break;
        }

        let mut sums = vec![0f64; cfg.k * dim];
        let mut counts = vec![0usize; cfg.k];
        for (i, &c) in labels.iter().enumerate() {
            let c = c as usize;
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += x as f64;
            }
        }
        let empty: Vec<usize> = (0..cfg.k).filter(|&c| counts[c] == 0).collect();
        for c in 0..cfg.k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                    *dst = (s * inv) as f32;
                }
            }
        }
        if !empty.is_empty() {
            let mut far: Vec<usize> = (0..n).collect();
            far.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
            for (c, &i) in empty.iter().zip(&far) {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(i));
            }
        }
        prev = Some(labels);
    }
    Ok(KMeans {
        dim,
        centroids,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_data(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn objective_never_increases() {
        let data = random_data(2000, 4, 1);
        let mut cfg = KMeansConfig::new(32);
        cfg.iters = 30;
        let km = train(&data, 4, &cfg).unwrap();
        assert!(km.trace.len() >= 2);
        for w in km.trace.windows(2) {
            assert!(w[1] <= w[0], "trace increased: {:?}", w);
        }
    }

    #[test]
    fn zero_error_when_k_covers_distinct_points() {
        let pts = [0.0f32, 0.0, 1.0, 1.0, 0.0, 0.0, 5.0, -2.0];
        let km = train(&pts, 2, &KMeansConfig::new(3)).unwrap();
        assert_eq!(*km.trace.last().unwrap(), 0.0);
        // More centroids than distinct points: still exact, extra ones idle.
        let km = train(&pts, 2, &KMeansConfig::new(8)).unwrap();
        assert_eq!(*km.trace.last().unwrap(), 0.0);
    }

    #[test]
    fn schedules_agree() {
        let data = random_data(5000, 8, 2);
        let mut cfg = KMeansConfig::new(16);
        cfg.exec = Exec::Sequential;
        let a = train(&data, 8, &cfg).unwrap();
        cfg.exec = Exec::Parallel;
        let b = train(&data, 8, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subsampling_respects_cap() {
        let data = random_data(1000, 2, 3);
        let mut cfg = KMeansConfig::new(4);
        cfg.max_points = 100;
        let km = train(&data, 2, &cfg).unwrap();
        assert_eq!(km.k(), 4);
        assert!(train(&data[..3], 2, &cfg).is_err());
        assert!(train(&[], 2, &cfg).is_err());
    }
}
