//! Randomized zeroth-order gradient estimation and the forward-only
//! parameter update.
//!
//! The estimator averages `k` two-sided finite differences along fresh
//! Gaussian directions, one shared direction per +/- pair:
//!
//! ```text
//! g_hat = (1/k) * sum_i [ (L(theta + c*u_i) - L(theta - c*u_i)) / (2c) ] * u_i
//! ```
//!
//! Directions are unnormalized draws from N(0, I); the 1/(2c) scaling
//! assumes exactly that. Parameters are restored bitwise after every
//! estimate, success or error.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelGraph, ParamSelection};

/// Estimator/update hyperparameters. Defaults: k=5 queries, smoothing
/// c=0.01, learning rate 0.01.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooConfig {
    pub k: usize,
    pub c: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            k: 5,
            c: 0.01,
            lr: 0.01,
            seed: 0,
        }
    }
}

impl ZooConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("zoo: k must be >= 1".into()));
        }
        if self.c <= 0.0 {
            return Err(Error::Config("zoo: c must be > 0".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("zoo: lr must be > 0".into()));
        }
        Ok(())
    }
}

/// One gradient estimate: the direction-weighted average plus the raw
/// per-query loss pairs. Exactly `2k` loss evaluations are consumed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub loss_pairs: Vec<(f64, f64)>,
    pub forward_evals: usize,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean of the 2k perturbed losses: the standard smoothed-loss proxy
    /// for L(theta) that costs no extra evaluation.
    pub fn smoothed_loss(&self) -> f64 {
        if self.loss_pairs.is_empty() {
            return f64::NAN;
        }
        self.loss_pairs
            .iter()
            .map(|(a, b)| a + b)
            .sum::<f64>()
            / (2 * self.loss_pairs.len()) as f64
    }
}

/// Estimate the gradient of a pure function of a flat parameter vector.
///
/// The caller's `theta` is never mutated; perturbations are evaluated
/// through the `loss_at` callback on private copies.
pub fn estimate_gradient_flat<R, L>(
    theta: &[f64],
    k: usize,
    c: f64,
    rng: &mut R,
    loss_at: &mut L,
) -> Result<GradientEstimate>
where
    R: Rng,
    L: FnMut(&[f64]) -> Result<f64>,
{
    let d = theta.len();
    if d == 0 {
        return Err(Error::Input("estimate_gradient: empty parameter view".into()));
    }
    if k < 1 || c <= 0.0 {
        return Err(Error::Config("estimate_gradient: need k >= 1 and c > 0".into()));
    }
    let mut grad = vec![0.0; d];
    let mut loss_pairs = Vec::with_capacity(k);
    let mut perturbed = vec![0.0; d];
    for q in 0..k {
        let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            perturbed[i] = theta[i] + c * u[i];
        }
        let plus = match loss_at(&perturbed) {
            Ok(v) if v.is_finite() => v,
            _ => return Err(Error::Estimation { query: q }),
        };
        for i in 0..d {
            perturbed[i] = theta[i] - c * u[i];
        }
        let minus = match loss_at(&perturbed) {
            Ok(v) if v.is_finite() => v,
            _ => return Err(Error::Estimation { query: q }),
        };
        let coeff = (plus - minus) / (2.0 * c);
        for i in 0..d {
            grad[i] += coeff * u[i];
        }
        loss_pairs.push((plus, minus));
    }
    for g in &mut grad {
        *g /= k as f64;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Estimation { query: k });
    }
    Ok(GradientEstimate {
        grad,
        loss_pairs,
        forward_evals: 2 * k,
    })
}

/// Estimate the gradient of a model loss restricted to a parameter
/// selection. The model's selected parameters are bitwise restored
/// afterwards regardless of errors.
pub fn estimate_gradient<R, L>(
    model: &mut ModelGraph,
    selection: &ParamSelection,
    cfg: &ZooConfig,
    rng: &mut R,
    loss: &mut L,
) -> Result<GradientEstimate>
where
    R: Rng,
    L: FnMut(&ModelGraph) -> Result<f64>,
{
    cfg.validate()?;
    let theta = selection.read(model)?;
    // split borrows: the write closure needs &mut model, the loss closure
    // only reads, so thread the model through a RefCell-free dance by
    // interleaving the two manually.
    let mut grad = vec![0.0; theta.len()];
    let mut loss_pairs = Vec::with_capacity(cfg.k);
    let mut perturbed = vec![0.0; theta.len()];
    for q in 0..cfg.k {
        let u: Vec<f64> = (0..theta.len()).map(|_| rng.sample(StandardNormal)).collect();
        let mut eval_at = |coef: f64, model: &mut ModelGraph, u: &[f64]| -> Result<f64> {
            for i in 0..theta.len() {
                perturbed[i] = theta[i] + coef * u[i];
            }
            selection.write(model, &perturbed)?;
            loss(model)
        };
        let plus = eval_at(cfg.c, model, &u);
        let plus = match plus {
            Ok(v) if v.is_finite() => v,
            _ => {
                selection.write(model, &theta)?;
                return Err(Error::Estimation { query: q });
            }
        };
        let minus = eval_at(-cfg.c, model, &u);
        let minus = match minus {
            Ok(v) if v.is_finite() => v,
            _ => {
                selection.write(model, &theta)?;
                return Err(Error::Estimation { query: q });
            }
        };
        let coeff = (plus - minus) / (2.0 * cfg.c);
        for i in 0..theta.len() {
            grad[i] += coeff * u[i];
        }
        loss_pairs.push((plus, minus));
    }
    selection.write(model, &theta)?;
    for g in &mut grad {
        *g /= cfg.k as f64;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Estimation { query: cfg.k });
    }
    Ok(GradientEstimate {
        grad,
        loss_pairs,
        forward_evals: 2 * cfg.k,
    })
}

/// Apply `theta <- theta - lr * grad` through the selection view.
pub fn apply_update(
    model: &mut ModelGraph,
    selection: &ParamSelection,
    grad: &[f64],
    lr: f64,
) -> Result<()> {
    let mut theta = selection.read(model)?;
    if theta.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            op: "apply_update",
            left: vec![theta.len()],
            right: vec![grad.len()],
        });
    }
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= lr * g;
    }
    selection.write(model, &theta)
}

/// Record of one zeroth-order step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub grad_norm: f64,
    /// Smoothed loss at the pre-step parameters (mean of the 2k queries).
    pub loss_before: f64,
    /// Loss evaluated once at the post-step parameters.
    pub loss_after: f64,
    pub forward_evals: usize,
}

/// One estimate-then-update step plus a loss evaluation at the new
/// parameters: `2k + 1` loss evaluations total. On estimation failure the
/// parameters are left at their pre-step values.
pub fn zoo_step<R, L>(
    model: &mut ModelGraph,
    selection: &ParamSelection,
    cfg: &ZooConfig,
    rng: &mut R,
    loss: &mut L,
) -> Result<StepRecord>
where
    R: Rng,
    L: FnMut(&ModelGraph) -> Result<f64>,
{
    let est = estimate_gradient(model, selection, cfg, rng, loss)?;
    apply_update(model, selection, &est.grad, cfg.lr)?;
    let after = loss(model)?;
    Ok(StepRecord {
        grad_norm: est.norm(),
        loss_before: est.smoothed_loss(),
        loss_after: after,
        forward_evals: est.forward_evals + 1,
    })
}
