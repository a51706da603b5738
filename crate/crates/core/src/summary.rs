//! Privacy-preserving task summaries.
//!
//! A task's domain is summarized by cluster centers over its documents'
//! mean word embeddings. Only the centers travel to the server, where they
//! feed the relevance scoring that drives selective transfer.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Cluster-center matrix `[k, D]` describing one task's domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub centers: Tensor,
}

impl TaskSummary {
    pub fn num_centers(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn center(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.centers.data()[i * d..(i + 1) * d]
    }
}

/// Mean embedding of a document's in-vocabulary tokens; `None` when every
/// token maps to the OOV row.
pub fn document_vector(tokens: &[usize], embeddings: &Tensor, oov_row: usize) -> Option<Vec<f64>> {
    let d = embeddings.shape()[1];
    let mut acc = vec![0.0; d];
    let mut count = 0usize;
    for &tok in tokens {
        if tok == oov_row {
            continue;
        }
        let row = &embeddings.data()[tok * d..(tok + 1) * d];
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    for a in acc.iter_mut() {
        *a /= count as f64;
    }
    Some(acc)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Summarizes a task by Lloyd-style k-means over document vectors with
/// `min(q, #docs)` centers. Documents made entirely of OOV tokens are
/// skipped; an all-OOV task is an error.
pub fn summarize_task(
    docs: &[Vec<usize>],
    embeddings: &Tensor,
    oov_row: usize,
    q: usize,
    seed: u64,
) -> Result<TaskSummary, CoreError> {
    if q == 0 || docs.is_empty() {
        return Err(CoreError::EmptyInput {
            context: "summarize_task",
        });
    }
    let points: Vec<Vec<f64>> = docs
        .iter()
        .filter_map(|doc| document_vector(doc, embeddings, oov_row))
        .collect();
    if points.is_empty() {
        return Err(CoreError::Invalid(
            "summarize_task: every document is out of vocabulary".into(),
        ));
    }
    let d = embeddings.shape()[1];
    let k = q.min(points.len());
    let centers = kmeans(&points, k, d, seed);
    let mut data = Vec::with_capacity(k * d);
    for c in &centers {
        data.extend_from_slice(c);
    }
    Ok(TaskSummary {
        centers: Tensor::new(vec![k, d], data)?,
    })
}

fn kmeans(points: &[Vec<f64>], k: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    if k == points.len() {
        return points.to_vec();
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    let mut rng = rng_from(seed, &[0x6b6d656e]);
    order.shuffle(&mut rng);
    let mut centers: Vec<Vec<f64>> = order[..k].iter().map(|&i| points[i].clone()).collect();

    let mut assignment = vec![0usize; points.len()];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..100 {
        let mut inertia = 0.0;
        for (pi, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let dist = sq_dist(p, c);
                if dist < best_d {
                    best_d = dist;
                    best = ci;
                }
            }
            assignment[pi] = best;
            inertia += best_d;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (pi, p) in points.iter().enumerate() {
            let c = assignment[pi];
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ci in 0..k {
            if counts[ci] == 0 {
                continue; // empty cluster keeps its center
            }
            for (c, s) in centers[ci].iter_mut().zip(&sums[ci]) {
                *c = s / counts[ci] as f64;
            }
        }
        let change = if prev_inertia.is_finite() && prev_inertia > 0.0 {
            libm::fabs(prev_inertia - inertia) / prev_inertia
        } else if prev_inertia == 0.0 {
            0.0
        } else {
            1.0
        };
        if change < 1e-6 {
            break;
        }
        prev_inertia = inertia;
    }
    centers
}
