//! Spatial feature aggregation alignment: the adaptation objective.
//!
//! Per-layer features are aggregated into one global descriptor per sample
//! (token mean for the ViT, global average pooling for the CNN). Before
//! adaptation, the mean and population standard deviation of these
//! descriptors over a set of source samples are frozen as the alignment
//! target. The adaptation loss is then
//!
//! ```text
//! lambda1 * sum_x H(softmax(logits_x))
//!   + lambda2 * sum_l ( |mu_l(X) - mu_l^S|^2 + |sigma_l(X) - sigma_l^S|^2 )
//! ```
//!
//! summed over the batch (entropy) and over the aligned layers (alignment,
//! squared Euclidean norms). No label ever enters: the API accepts inputs
//! only.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eager, Ops};
use crate::models::{Features, LayerFeatures, ModelGraph};
use crate::tensor::{self, Tensor};

/// Aggregated per-layer source statistics (population convention).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceStats {
    /// Aligned layer list, sorted.
    pub layers: Vec<usize>,
    pub mu: BTreeMap<usize, Vec<f64>>,
    pub sigma: BTreeMap<usize, Vec<f64>>,
    pub n_samples: usize,
}

/// Loss weights. `lambda1` scales the entropy term, `lambda2` the
/// alignment term; they must not both be zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if lambda1 < 0.0 || lambda2 < 0.0 || (lambda1 == 0.0 && lambda2 == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 and not both zero (got {lambda1}, {lambda2})"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }

    /// Paper defaults per architecture: ViT (1, 0.4), CNN (0.1, 1).
    pub fn default_for(arch: crate::models::Architecture) -> Self {
        match arch {
            crate::models::Architecture::TinyVit => Self {
                lambda1: 1.0,
                lambda2: 0.4,
            },
            crate::models::Architecture::TinyCnn => Self {
                lambda1: 0.1,
                lambda2: 1.0,
            },
        }
    }
}

/// How to treat the batch standard deviation when the batch is a single
/// sample (where a spread is undefined).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPolicy {
    /// Error out; the caller must provide a batch of at least two.
    Strict,
    /// Align means only until the effective batch has two samples
    /// (memory-queue cold start).
    MuOnlyIfSingleton,
}

/// Value of the objective with its two raw terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Unweighted sum of per-sample prediction entropies.
    pub entropy_sum: f64,
    /// Unweighted sum of per-layer squared stat distances.
    pub alignment_sum: f64,
    /// `lambda1 * entropy_sum + lambda2 * alignment_sum`.
    pub total: f64,
}

/// Aggregate one sample's layer features into its global descriptor
/// `v_l`: the mean over tokens (ViT) or spatial positions (CNN).
pub fn aggregate(features: &LayerFeatures, sample: usize) -> Result<Vec<f64>> {
    match features {
        Features::Tokens(mats) => Ok(tensor::mean_rows(&mats[sample])?.data().to_vec()),
        Features::Spatial(t) => {
            let (_, c, h, w) = t.dims4("aggregate")?;
            let hw = (h * w) as f64;
            Ok((0..c)
                .map(|ci| {
                    let base = (sample * c + ci) * h * w;
                    t.data()[base..base + h * w].iter().sum::<f64>() / hw
                })
                .collect())
        }
    }
}

/// Aggregated descriptors of every sample as rows of an `[N×d]` matrix,
/// built in op space so it can be differentiated.
pub fn descriptor_matrix<O: Ops>(ops: &mut O, features: &Features<O::V>) -> Result<O::V> {
    match features {
        Features::Tokens(mats) => {
            let mut rows = Vec::with_capacity(mats.len());
            for m in mats {
                let v = ops.mean_rows(m)?;
                let d = ops.value(&v).numel();
                rows.push(ops.reshape(&v, vec![1, d])?);
            }
            ops.concat_rows(&rows)
        }
        Features::Spatial(t) => ops.global_avg_pool(t),
    }
}

fn column_mean_std(desc: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = desc.dims2("column_mean_std")?;
    let mut ops = Eager;
    let mu = ops.mean_rows(desc)?;
    let neg_mu = ops.scale(&mu, -1.0)?;
    let centered = ops.add_bias_row(desc, &neg_mu)?;
    let sq = ops.mul(&centered, &centered)?;
    let var = ops.mean_rows(&sq)?;
    let sigma = ops.sqrt(&var)?;
    debug_assert_eq!(mu.numel(), d);
    let _ = n;
    Ok((mu.data().to_vec(), sigma.data().to_vec()))
}

/// Compute source statistics for the given layers over `source_samples`
/// (at least two, so the spread is defined).
pub fn compute_source_stats(
    model: &ModelGraph,
    source_samples: &Tensor,
    layers: &[usize],
) -> Result<SourceStats> {
    let n = source_samples.shape()[0];
    if n < 2 {
        return Err(Error::Input(format!(
            "source stats need >= 2 samples, got {n}"
        )));
    }
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return Err(Error::Input("source stats: empty layer list".into()));
    }
    let capture: BTreeSet<usize> = sorted.iter().copied().collect();
    let (_, feats) = model.forward(source_samples, &capture)?;
    let mut mu = BTreeMap::new();
    let mut sigma = BTreeMap::new();
    for &l in &sorted {
        let desc = descriptor_matrix(&mut Eager, &feats[&l])?;
        let (m, s) = column_mean_std(&desc)?;
        mu.insert(l, m);
        sigma.insert(l, s);
    }
    Ok(SourceStats {
        layers: sorted,
        mu,
        sigma,
        n_samples: n,
    })
}

/// Build the objective in op space from a forward pass of `model` on
/// `batch`. Returns `(total, entropy_sum, alignment_sum)` as op values.
pub fn tta_loss_generic<O: Ops>(
    model: &ModelGraph,
    ops: &mut O,
    batch: &Tensor,
    stats: &SourceStats,
    w: &LossWeights,
    policy: SigmaPolicy,
) -> Result<(O::V, O::V, O::V)> {
    let n = batch.shape()[0];
    if n == 0 {
        return Err(Error::Input("tta_loss: empty batch".into()));
    }
    if w.lambda2 > 0.0 && n < 2 && policy == SigmaPolicy::Strict {
        return Err(Error::Input(
            "tta_loss: batch statistics undefined for a single sample; \
             use the memory queue or a larger batch"
                .into(),
        ));
    }
    let capture: BTreeSet<usize> = if w.lambda2 > 0.0 {
        stats.layers.iter().copied().collect()
    } else {
        BTreeSet::new()
    };
    let fwd = model.forward_generic(ops, batch, &capture)?;

    // entropy term: -sum p*log(p) over all rows, softmax never yields exact 0
    let p = ops.softmax(&fwd.logits)?;
    let lp = ops.log_softmax(&fwd.logits)?;
    let plp = ops.mul(&p, &lp)?;
    let neg_entropy = ops.sum_all(&plp)?;
    let entropy_sum = ops.scale(&neg_entropy, -1.0)?;

    // alignment term
    let mut alignment_sum = ops.constant(&Tensor::scalar(0.0));
    if w.lambda2 > 0.0 {
        for &l in &stats.layers {
            let feats = fwd
                .features
                .get(&l)
                .ok_or_else(|| Error::Input(format!("tta_loss: stats cover layer {l} but it was not captured")))?;
            let desc = descriptor_matrix(ops, feats)?;
            let mu_s = ops.constant(&Tensor::new(
                vec![stats.mu[&l].len()],
                stats.mu[&l].clone(),
            )?);
            let sigma_s = ops.constant(&Tensor::new(
                vec![stats.sigma[&l].len()],
                stats.sigma[&l].clone(),
            )?);
            let mu = ops.mean_rows(&desc)?;
            let dmu = ops.sub(&mu, &mu_s)?;
            let dmu_sq = ops.mul(&dmu, &dmu)?;
            let mu_dist = ops.sum_all(&dmu_sq)?;
            alignment_sum = ops.add(&alignment_sum, &mu_dist)?;
            if n >= 2 {
                let neg_mu = ops.scale(&mu, -1.0)?;
                let centered = ops.add_bias_row(&desc, &neg_mu)?;
                let sq = ops.mul(&centered, &centered)?;
                let var = ops.mean_rows(&sq)?;
                let sigma = ops.sqrt(&var)?;
                let dsig = ops.sub(&sigma, &sigma_s)?;
                let dsig_sq = ops.mul(&dsig, &dsig)?;
                let sig_dist = ops.sum_all(&dsig_sq)?;
                alignment_sum = ops.add(&alignment_sum, &sig_dist)?;
            }
        }
    }
    let weighted_h = ops.scale(&entropy_sum, w.lambda1)?;
    let weighted_a = ops.scale(&alignment_sum, w.lambda2)?;
    let total = ops.add(&weighted_h, &weighted_a)?;
    Ok((total, entropy_sum, alignment_sum))
}

/// The adaptation objective on a batch of at least two samples.
pub fn tta_loss(
    model: &ModelGraph,
    batch: &Tensor,
    stats: &SourceStats,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    tta_loss_with_policy(model, batch, stats, w, SigmaPolicy::Strict)
}

pub fn tta_loss_with_policy(
    model: &ModelGraph,
    batch: &Tensor,
    stats: &SourceStats,
    w: &LossWeights,
    policy: SigmaPolicy,
) -> Result<LossBreakdown> {
    let (total, h, a) = tta_loss_generic(model, &mut Eager, batch, stats, w, policy)?;
    Ok(LossBreakdown {
        entropy_sum: h.item(),
        alignment_sum: a.item(),
        total: total.item(),
    })
}

/// The same objective evaluated on already-materialized parts: class
/// probability rows and per-layer descriptor matrices. This is the
/// verification surface for constructed inputs (exact one-hot rows are
/// legal here; `0*log 0 = 0`).
pub fn tta_loss_parts(
    class_probs: &Tensor,
    descriptors: &BTreeMap<usize, Tensor>,
    stats: &SourceStats,
    w: &LossWeights,
    policy: SigmaPolicy,
) -> Result<LossBreakdown> {
    let n = class_probs.shape()[0];
    if w.lambda2 > 0.0 && n < 2 && policy == SigmaPolicy::Strict {
        return Err(Error::Input(
            "tta_loss: batch statistics undefined for a single sample".into(),
        ));
    }
    let entropy_sum = tensor::sum_all(&tensor::entropy(class_probs)?)?.item();
    let mut alignment_sum = 0.0;
    if w.lambda2 > 0.0 {
        for &l in &stats.layers {
            let desc = descriptors.get(&l).ok_or_else(|| {
                Error::Input(format!("tta_loss: missing descriptors for layer {l}"))
            })?;
            let (mu, sigma) = column_mean_std(desc)?;
            alignment_sum += mu
                .iter()
                .zip(&stats.mu[&l])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            if n >= 2 {
                alignment_sum += sigma
                    .iter()
                    .zip(&stats.sigma[&l])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
        }
    }
    Ok(LossBreakdown {
        entropy_sum,
        alignment_sum,
        total: w.lambda1 * entropy_sum + w.lambda2 * alignment_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, ParamSelection};
    use crate::util::seeded_rng;
    use rand::Rng;

    fn random_batch(seed: u64, n: usize) -> Tensor {
        let mut rng = seeded_rng(seed);
        let data = (0..n * 256).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 1, 16, 16], data).unwrap()
    }

    #[test]
    fn aggregate_single_token_is_identity() {
        let t = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let f = Features::Tokens(vec![t.clone()]);
        assert_eq!(aggregate(&f, 0).unwrap(), t.data());
    }

    #[test]
    fn aggregate_two_point_mean() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let f = Features::Tokens(vec![t]);
        assert_eq!(aggregate(&f, 0).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn aggregate_matches_scalar_loop() {
        let mut rng = seeded_rng(5);
        for _ in 0..100 {
            let (m, d) = (rng.gen_range(2..9), rng.gen_range(2..7));
            let data: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = Tensor::new(vec![m, d], data.clone()).unwrap();
            let v = aggregate(&Features::Tokens(vec![t]), 0).unwrap();
            for j in 0..d {
                let want: f64 = (0..m).map(|i| data[i * d + j]).sum::<f64>() / m as f64;
                assert!((v[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn source_stats_zero_spread() {
        // identical samples => sigma exactly 0
        let model = ModelGraph::new(Architecture::TinyVit, 1);
        let one = random_batch(3, 1);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        data.extend_from_slice(one.data());
        let batch = Tensor::new(vec![3, 1, 16, 16], data).unwrap();
        let stats = compute_source_stats(&model, &batch, &[0, 4]).unwrap();
        for l in [0usize, 4] {
            assert!(stats.sigma[&l].iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn source_stats_two_point_convention() {
        // descriptors (0) and (2) => mu=1, population sigma=1
        let desc = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let (mu, sigma) = column_mean_std(&desc).unwrap();
        assert_eq!(mu, vec![1.0]);
        assert_eq!(sigma, vec![1.0]);
    }

    #[test]
    fn source_stats_match_two_pass_oracle() {
        let model = ModelGraph::new(Architecture::TinyCnn, 2);
        let batch = random_batch(11, 12);
        let layers = [1usize, 3];
        let stats = compute_source_stats(&model, &batch, &layers).unwrap();
        let capture: BTreeSet<usize> = layers.iter().copied().collect();
        let (_, feats) = model.forward(&batch, &capture).unwrap();
        for &l in &layers {
            let d = stats.mu[&l].len();
            let vs: Vec<Vec<f64>> = (0..12).map(|i| aggregate(&feats[&l], i).unwrap()).collect();
            for j in 0..d {
                let mean: f64 = vs.iter().map(|v| v[j]).sum::<f64>() / 12.0;
                let var: f64 = vs.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / 12.0;
                assert!((stats.mu[&l][j] - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
                assert!((stats.sigma[&l][j] - var.sqrt()).abs() <= 1e-12 * (1.0 + var.sqrt()));
            }
        }
    }

    #[test]
    fn source_stats_reject_single_sample() {
        let model = ModelGraph::new(Architecture::TinyVit, 1);
        assert!(compute_source_stats(&model, &random_batch(1, 1), &[0]).is_err());
    }

    #[test]
    fn fixed_point_of_objective_is_zero() {
        // constructed batch: descriptors match stats exactly, one-hot rows
        let stats = SourceStats {
            layers: vec![0],
            mu: [(0usize, vec![1.5, -0.5])].into_iter().collect(),
            sigma: [(0usize, vec![0.25, 0.5])].into_iter().collect(),
            n_samples: 2,
        };
        // two samples at mu +/- sigma have exactly these stats
        let desc = Tensor::new(
            vec![2, 2],
            vec![1.5 + 0.25, -0.5 + 0.5, 1.5 - 0.25, -0.5 - 0.5],
        )
        .unwrap();
        let probs = Tensor::new(
            vec![2, 4],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let w = LossWeights::new(1.0, 0.4).unwrap();
        let out = tta_loss_parts(
            &probs,
            &[(0usize, desc)].into_iter().collect(),
            &stats,
            &w,
            SigmaPolicy::Strict,
        )
        .unwrap();
        assert!(out.total.abs() < 1e-9, "fixed point gives {}", out.total);
        assert_eq!(out.entropy_sum, 0.0);
        assert!(out.alignment_sum < 1e-12);
    }

    #[test]
    fn lambda2_zero_reduces_to_entropy_oracle() {
        let model = ModelGraph::new(Architecture::TinyVit, 4);
        let batch = random_batch(6, 5);
        let stats = compute_source_stats(&model, &random_batch(7, 8), &[0, 4]).unwrap();
        let w = LossWeights::new(1.0, 0.0).unwrap();
        let out = tta_loss(&model, &batch, &stats, &w).unwrap();
        let logits = model.logits(&batch).unwrap();
        let want = tensor::sum_all(&tensor::entropy(&tensor::softmax(&logits).unwrap()).unwrap())
            .unwrap()
            .item();
        assert!((out.total - want).abs() <= 1e-12 * (1.0 + want.abs()));
        assert!((out.entropy_sum - want).abs() <= 1e-12 * (1.0 + want.abs()));
        assert_eq!(out.alignment_sum, 0.0);
    }

    #[test]
    fn alignment_zero_iff_stats_match() {
        let model = ModelGraph::new(Architecture::TinyCnn, 5);
        let batch = random_batch(9, 8);
        let layers: Vec<usize> = vec![2, 3];
        let stats = compute_source_stats(&model, &batch, &layers).unwrap();
        let w = LossWeights::new(0.0, 1.0).unwrap();
        // same batch => batch stats equal source stats by construction
        let out = tta_loss(&model, &batch, &stats, &w).unwrap();
        assert!(out.alignment_sum.abs() < 1e-10, "got {}", out.alignment_sum);
        // a different batch must not align exactly
        let out2 = tta_loss(&model, &random_batch(10, 8), &stats, &w).unwrap();
        assert!(out2.alignment_sum > 1e-6);
    }

    #[test]
    fn loss_terms_nonnegative() {
        for seed in 0..10u64 {
            let model = ModelGraph::new(Architecture::TinyVit, seed);
            let stats = compute_source_stats(&model, &random_batch(seed + 50, 6), &[1, 4]).unwrap();
            let w = LossWeights::default_for(Architecture::TinyVit);
            let out = tta_loss(&model, &random_batch(seed, 4), &stats, &w).unwrap();
            assert!(out.entropy_sum >= 0.0);
            assert!(out.alignment_sum >= 0.0);
            assert!(out.total >= 0.0);
        }
    }

    #[test]
    fn batch_permutation_leaves_loss_unchanged() {
        let model = ModelGraph::new(Architecture::TinyVit, 6);
        let batch = random_batch(20, 5);
        let stats = compute_source_stats(&model, &random_batch(21, 8), &[0, 2, 4]).unwrap();
        let w = LossWeights::default_for(Architecture::TinyVit);
        let a = tta_loss(&model, &batch, &stats, &w).unwrap();
        // reverse the sample order
        let mut data = Vec::with_capacity(batch.numel());
        for i in (0..5).rev() {
            data.extend_from_slice(&batch.data()[i * 256..(i + 1) * 256]);
        }
        let rev = Tensor::new(batch.shape().to_vec(), data).unwrap();
        let b = tta_loss(&model, &rev, &stats, &w).unwrap();
        assert!((a.total - b.total).abs() <= 1e-9 * (1.0 + a.total.abs()));
    }

    #[test]
    fn singleton_batch_strict_errors_mu_only_succeeds() {
        let model = ModelGraph::new(Architecture::TinyVit, 7);
        let stats = compute_source_stats(&model, &random_batch(30, 6), &[0, 4]).unwrap();
        let w = LossWeights::default_for(Architecture::TinyVit);
        let one = random_batch(31, 1);
        assert!(tta_loss(&model, &one, &stats, &w).is_err());
        let out =
            tta_loss_with_policy(&model, &one, &stats, &w, SigmaPolicy::MuOnlyIfSingleton).unwrap();
        assert!(out.total.is_finite());
    }

    #[test]
    fn loss_is_continuous_in_norm_affines() {
        let mut model = ModelGraph::new(Architecture::TinyVit, 8);
        let batch = random_batch(40, 4);
        let stats = compute_source_stats(&model, &random_batch(41, 8), &[1, 2, 4]).unwrap();
        let w = LossWeights::default_for(Architecture::TinyVit);
        let sel = ParamSelection::for_layers(&model, &[2]).unwrap();
        let theta = sel.read(&model).unwrap();
        let base = tta_loss(&model, &batch, &stats, &w).unwrap().total;
        let mut diffs = Vec::new();
        for delta in [1e-2, 1e-3, 1e-4] {
            let mut t = theta.clone();
            t[0] += delta;
            sel.write(&mut model, &t).unwrap();
            let v = tta_loss(&model, &batch, &stats, &w).unwrap().total;
            sel.write(&mut model, &theta).unwrap();
            diffs.push((v - base).abs());
        }
        assert!(
            diffs[0] > diffs[1] && diffs[1] > diffs[2],
            "|dL| not shrinking with delta: {diffs:?}"
        );
        assert!(diffs[2] < 1e-2);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.5).is_err());
        assert!(LossWeights::new(0.0, 1.0).is_ok());
    }
}
