//! Inverted-file approximate search: spherical k-means coarse quantizer, and
//! at query time an exact scan over the rows of the `probes` closest lists.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{KnowledgeBase, PatchHit};
use crate::embedding::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IvfParams {
    pub lists: usize,
    pub probes: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for IvfParams {
    fn default() -> Self {
        Self {
            lists: 64,
            probes: 8,
            iterations: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub(super) struct IvfIndex {
    dim: usize,
    centroids: Vec<f32>,
    lists: Vec<Vec<usize>>,
    probes: usize,
}

fn nearest(centroids: &[f32], dim: usize, v: &[f32]) -> usize {
    centroids
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, c)| (i, dot(c, v)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

impl IvfIndex {
    pub(super) fn train(kb: &KnowledgeBase, params: IvfParams) -> Self {
        let dim = kb.dim;
        let n = kb.len();
        let nlist = params.lists.clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut centroids: Vec<f32> = sample(&mut rng, n, nlist)
            .into_iter()
            .flat_map(|r| kb.entry(r).embedding.to_vec())
            .collect();

        let mut assign = vec![0usize; n];
        for _ in 0..params.iterations.max(1) {
            for (row, slot) in assign.iter_mut().enumerate() {
                *slot = nearest(&centroids, dim, kb.entry(row).embedding);
            }
            let mut sums = vec![0.0f64; nlist * dim];
            for (row, &c) in assign.iter().enumerate() {
                for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(kb.entry(row).embedding) {
                    *s += f64::from(x);
                }
            }
            for c in 0..nlist {
                let sum = &sums[c * dim..(c + 1) * dim];
                // empty clusters keep their previous centroid
                if let Ok(unit) = crate::embedding::normalize(sum) {
                    for (dst, x) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(unit) {
                        *dst = x as f32;
                    }
                }
            }
        }
        let mut lists = vec![Vec::new(); nlist];
        for row in 0..n {
            lists[nearest(&centroids, dim, kb.entry(row).embedding)].push(row);
        }
        Self {
            dim,
            centroids,
            lists,
            probes: params.probes.max(1),
        }
    }

    pub(super) fn search(&self, kb: &KnowledgeBase, q: &[f32], k: usize) -> Vec<PatchHit> {
        let mut order: Vec<(usize, f64)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, c)| (i, dot(c, q)))
            .collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let hits = order
            .iter()
            .take(self.probes)
            .flat_map(|&(list, _)| self.lists[list].iter())
            .map(|&row| PatchHit {
                row,
                score: dot(q, kb.entry(row).embedding),
            })
            .collect();
        kb.top_k_of(hits, k)
    }
}
