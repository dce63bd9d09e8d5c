//! Distribution-robust layer selection.
//!
//! For each tapped layer and each token/spatial position, the in- and
//! out-of-distribution feature vectors are pooled and 2-means clustered.
//! Purity measures how cleanly the two clusters separate the domains:
//! 0.5 means inseparable (the layer already maps both domains together),
//! 1.0 means fully separable (the layer is domain-sensitive and worth
//! updating). Layers with purity at or above a threshold form the update
//! set; optionally the shallowest layers are frozen regardless.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{LayerFeatures, ModelGraph, ParamSelection};
use crate::tensor::Tensor;
use crate::util::{mix_seed, parallel_map_indexed, seeded_rng};
use rand::Rng;

const MAX_KMEANS_ITERS: usize = 100;

/// Result of 2-means clustering.
#[derive(Debug, Clone)]
pub struct TwoMeans {
    /// Cluster id (0 or 1) per input point.
    pub assignments: Vec<u8>,
    pub centroids: [Vec<f64>; 2],
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k=2 and deterministic farthest-pair seeding: the
/// two mutually farthest points are the initial centroids, so the outcome
/// does not depend on random initialization. The seed only breaks exact
/// distance ties between candidate pairs. Runs to an assignment fixpoint or
/// 100 iterations.
///
/// Degenerate input (all points identical) converges immediately with both
/// centroids equal and every point assigned to cluster 0 by the tie rule
/// (ties go to the lower cluster id).
pub fn two_means(points: &[Vec<f64>], seed: u64) -> Result<TwoMeans> {
    if points.len() < 2 {
        return Err(Error::Input(format!(
            "two_means needs >= 2 points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Input("two_means: inconsistent point dimensions".into()));
    }

    // farthest pair; ties broken by a seeded draw over the tied pairs
    let mut best = (0usize, 1usize);
    let mut best_d = sq_dist(&points[0], &points[1]);
    let mut ties: Vec<(usize, usize)> = vec![best];
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d = sq_dist(&points[i], &points[j]);
            if d > best_d {
                best_d = d;
                best = (i, j);
                ties.clear();
                ties.push(best);
            } else if d == best_d && (i, j) != (0, 1) {
                ties.push((i, j));
            }
        }
    }
    if ties.len() > 1 {
        let mut rng = seeded_rng(seed);
        best = ties[rng.gen_range(0..ties.len())];
    }
    let mut centroids = [points[best.0].clone(), points[best.1].clone()];

    let mut assignments = vec![0u8; points.len()];
    let mut iterations = 0;
    for it in 1..=MAX_KMEANS_ITERS {
        iterations = it;
        let mut changed = false;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let d0 = sq_dist(p, &centroids[0]);
            let d1 = sq_dist(p, &centroids[1]);
            let next = u8::from(d1 < d0); // ties stay with cluster 0
            if next != *a {
                *a = next;
                changed = true;
            }
        }
        if it > 1 && !changed {
            break;
        }
        for c in 0..2 {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a as usize == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue; // keep previous centroid
            }
            let mut m = vec![0.0; dim];
            for p in &members {
                for (acc, v) in m.iter_mut().zip(p.iter()) {
                    *acc += v;
                }
            }
            for v in &mut m {
                *v /= members.len() as f64;
            }
            centroids[c] = m;
        }
    }
    Ok(TwoMeans {
        assignments,
        centroids,
        iterations,
    })
}

/// Purity of one clustering against the ID/OOD ground truth: the first
/// `n_id` points are ID, the rest OOD. Overlap ties count toward ID, which
/// changes nothing (the max is the same either way) but makes the counting
/// rule explicit.
fn purity_of(assignments: &[u8], n_id: usize) -> f64 {
    let total = assignments.len();
    let mut sum = 0usize;
    for c in 0..2u8 {
        let id_count = assignments[..n_id].iter().filter(|&&a| a == c).count();
        let ood_count = assignments[n_id..].iter().filter(|&&a| a == c).count();
        sum += id_count.max(ood_count);
    }
    sum as f64 / total as f64
}

/// Per-position and mean purity of one layer's features across the two
/// domain sets. Both sets must hold the same number of samples.
pub fn layer_purity(
    features_id: &LayerFeatures,
    features_ood: &LayerFeatures,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let n = features_id.num_samples();
    if features_ood.num_samples() != n {
        return Err(Error::Input(format!(
            "layer_purity: sample counts differ ({n} vs {})",
            features_ood.num_samples()
        )));
    }
    let m = features_id.num_positions();
    if features_ood.num_positions() != m || features_ood.dim() != features_id.dim() {
        return Err(Error::Input("layer_purity: feature shapes differ".into()));
    }
    if n == 1 {
        // singleton clusters are pure by construction
        return Ok((vec![1.0; m], 1.0));
    }
    let per_token = parallel_map_indexed(m, crate::util::thread_cap(), |pos| {
        let mut points = Vec::with_capacity(2 * n);
        for i in 0..n {
            points.push(features_id.position_vector(i, pos));
        }
        for i in 0..n {
            points.push(features_ood.position_vector(i, pos));
        }
        let km = two_means(&points, mix_seed(&[seed, pos as u64]))?;
        Ok::<f64, Error>(purity_of(&km.assignments, n))
    });
    let mut purities = Vec::with_capacity(m);
    for p in per_token {
        purities.push(p?);
    }
    let mean = purities.iter().sum::<f64>() / m as f64;
    Ok((purities, mean))
}

/// Full purity analysis of a model: per-layer purity, the selected update
/// set, and the parameters it went in with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PurityReport {
    /// Mean purity per layer, indexed by layer.
    pub layer_purity: Vec<f64>,
    /// Per-position purities per layer.
    pub token_purity: Vec<Vec<f64>>,
    pub samples_per_domain: usize,
    pub tau: f64,
    pub freeze_shallow: usize,
    /// Selected update layer set (post-threshold, post-freeze).
    pub selected: Vec<usize>,
}

/// Run the tapped forwards and select the update layer set:
/// `U = { l : P_l >= tau }` minus the first `freeze_shallow` layer indices.
pub fn select_layers(
    model: &ModelGraph,
    id_set: &Tensor,
    ood_set: &Tensor,
    tau: f64,
    freeze_shallow: usize,
    seed: u64,
) -> Result<(ParamSelection, PurityReport)> {
    if !(tau > 0.5 && tau <= 1.0) {
        return Err(Error::Config(format!("tau {tau} outside (0.5, 1.0]")));
    }
    let n = id_set.shape()[0];
    if ood_set.shape()[0] != n {
        return Err(Error::Input(format!(
            "select_layers: domain sets differ in size ({n} vs {})",
            ood_set.shape()[0]
        )));
    }
    let all: BTreeSet<usize> = (0..model.num_layers()).collect();
    let (_, id_feats) = model.forward(id_set, &all)?;
    let (_, ood_feats) = model.forward(ood_set, &all)?;

    let mut layer_p = Vec::with_capacity(model.num_layers());
    let mut token_p = Vec::with_capacity(model.num_layers());
    for l in 0..model.num_layers() {
        let (tokens, mean) = layer_purity(&id_feats[&l], &ood_feats[&l], mix_seed(&[seed, l as u64]))?;
        layer_p.push(mean);
        token_p.push(tokens);
    }

    let selected: Vec<usize> = (0..model.num_layers())
        .filter(|&l| layer_p[l] >= tau && l >= freeze_shallow)
        .collect();
    let report = PurityReport {
        layer_purity: layer_p,
        token_purity: token_p,
        samples_per_domain: n,
        tau,
        freeze_shallow,
        selected: selected.clone(),
    };
    if selected.is_empty() {
        return Err(Error::EmptySelection { tau });
    }
    let selection = ParamSelection::for_layers(model, &selected)?;
    Ok((selection, report))
}
