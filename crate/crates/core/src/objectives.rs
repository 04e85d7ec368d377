//! Cross-entropy risk and the training objectives built on it.
//!
//! Logit gradients returned here are gradients of the *batch mean* loss
//! unless stated otherwise, so they can be handed straight to
//! [`crate::mlp::backward`].

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledBatch;
use crate::math::{argmax, logsumexp, softmax_into, Matrix};
use crate::mlp::{logits, WeightSet};
use crate::{Error, Result};

/// Default TRADES trade-off factor.
pub const DEFAULT_TRADES_BETA: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CeLoss {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::shape("cross-entropy", format!("{} logit rows but {} labels", logits.rows(), labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Label { label, classes: logits.cols() });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-sample `logsumexp(z) - z_y` and its mean.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<CeLoss> {
    check_labels(logits, labels)?;
    let per_sample: Vec<f64> = logits.row_iter().zip(labels).map(|(row, &y)| logsumexp(row) - row[y]).collect();
    let mean = mean(&per_sample);
    Ok(CeLoss { per_sample, mean })
}

/// Per-sample gradient `σ(z) - onehot(y)` (not divided by `n`).
pub fn ce_logit_grad(logits: &Matrix, labels: &[usize]) -> Result<Matrix> {
    check_labels(logits, labels)?;
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &y) in labels.iter().enumerate() {
        softmax_into(logits.row(i), g.row_mut(i));
        g.row_mut(i)[y] -= 1.0;
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskReport {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub n: usize,
    pub correct_mask: Vec<bool>,
}

impl RiskReport {
    pub fn n_correct(&self) -> usize {
        self.correct_mask.iter().filter(|&&c| c).count()
    }
}

/// Correctness by argmax with lowest-index tie-breaking.
pub fn correct_mask(logits: &Matrix, labels: &[usize]) -> Vec<bool> {
    logits.row_iter().zip(labels).map(|(row, &y)| argmax(row) == y).collect()
}

pub fn risk_from_logits(logits: &Matrix, labels: &[usize]) -> Result<RiskReport> {
    let ce = ce_loss(logits, labels)?;
    let correct_mask = correct_mask(logits, labels);
    let n = labels.len();
    let hits = correct_mask.iter().filter(|&&c| c).count();
    let accuracy = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    Ok(RiskReport { mean_loss: ce.mean, accuracy, n, correct_mask })
}

/// Empirical CE risk and accuracy of `model` on `batch`.
pub fn risk(model: &WeightSet, batch: &LabeledBatch) -> Result<RiskReport> {
    risk_from_logits(&logits(model, batch.inputs())?, batch.labels())
}

/// Base training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectiveSpec {
    /// Clean cross-entropy.
    Standard,
    /// `(1-λ)·CE(clean) + λ·CE(adv)`; λ = 1 is PGD adversarial training.
    Mixture { lambda: f64 },
    /// `CE(clean) + β·KL(σ(f(clean)) ‖ σ(f(adv)))`.
    Trades { beta: f64 },
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ObjectiveSpec::Standard => Ok(()),
            ObjectiveSpec::Mixture { lambda } => check_lambda(lambda),
            ObjectiveSpec::Trades { beta } => check_beta(beta),
        }
    }

    /// Whether the objective consumes adversarial inputs.
    pub fn needs_attack(&self) -> bool {
        match *self {
            ObjectiveSpec::Standard => false,
            ObjectiveSpec::Mixture { lambda } => lambda > 0.0,
            ObjectiveSpec::Trades { .. } => true,
        }
    }

    /// The trade-off factor λ for mixture objectives (0 for standard training).
    pub fn lambda(&self) -> Option<f64> {
        match *self {
            ObjectiveSpec::Standard => Some(0.0),
            ObjectiveSpec::Mixture { lambda } => Some(lambda),
            ObjectiveSpec::Trades { .. } => None,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// Loss value with gradients of the batch-mean loss for both logit branches.
#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub clean_grad: Matrix,
    /// `None` when the adversarial branch carries no weight.
    pub adv_grad: Option<Matrix>,
}

pub fn mixture_from_logits(clean: &Matrix, adv: Option<&Matrix>, labels: &[usize], lambda: f64) -> Result<ObjectiveValue> {
    check_lambda(lambda)?;
    let n = labels.len().max(1) as f64;
    let clean_ce = ce_loss(clean, labels)?;
    let mut clean_grad = ce_logit_grad(clean, labels)?;
    clean_grad.scale_in_place((1.0 - lambda) / n);
    if lambda == 0.0 {
        return Ok(ObjectiveValue { loss: clean_ce.mean, clean_grad, adv_grad: None });
    }
    let adv = adv.ok_or_else(|| Error::Parameter("mixture objective with lambda > 0 needs adversarial logits".into()))?;
    clean.check_same_shape(adv, "mixture_objective")?;
    let adv_ce = ce_loss(adv, labels)?;
    let mut adv_grad = ce_logit_grad(adv, labels)?;
    adv_grad.scale_in_place(lambda / n);
    let loss = (1.0 - lambda) * clean_ce.mean + lambda * adv_ce.mean;
    Ok(ObjectiveValue { loss, clean_grad, adv_grad: Some(adv_grad) })
}

/// `(1-λ)·CE(f(x)) + λ·CE(f(x'))` on a batch and its adversarial inputs.
pub fn mixture_objective(model: &WeightSet, batch: &LabeledBatch, lambda: f64, adv_inputs: &Matrix) -> Result<ObjectiveValue> {
    check_lambda(lambda)?;
    batch.inputs().check_same_shape(adv_inputs, "mixture_objective")?;
    let clean = logits(model, batch.inputs())?;
    let adv = logits(model, adv_inputs)?;
    mixture_from_logits(&clean, Some(&adv), batch.labels(), lambda)
}

/// Row-wise `KL(σ(p) ‖ σ(q))` computed in the log domain.
pub fn kl_rows(p_logits: &Matrix, q_logits: &Matrix) -> Result<Vec<f64>> {
    p_logits.check_same_shape(q_logits, "kl_rows")?;
    Ok(p_logits
        .row_iter()
        .zip(q_logits.row_iter())
        .map(|(p, q)| {
            let (lp, lq) = (logsumexp(p), logsumexp(q));
            let kl: f64 = p
                .iter()
                .zip(q)
                .map(|(&a, &b)| {
                    let log_p = a - lp;
                    log_p.exp() * (log_p - (b - lq))
                })
                .sum();
            kl.max(0.0)
        })
        .collect())
}

pub fn trades_from_logits(clean: &Matrix, adv: &Matrix, labels: &[usize], beta: f64) -> Result<ObjectiveValue> {
    check_beta(beta)?;
    clean.check_same_shape(adv, "trades_objective")?;
    let n = labels.len().max(1) as f64;
    let ce = ce_loss(clean, labels)?;
    let kl = kl_rows(clean, adv)?;
    let loss = ce.mean + beta * mean(&kl);

    let mut clean_grad = ce_logit_grad(clean, labels)?;
    clean_grad.scale_in_place(1.0 / n);
    let mut adv_grad = Matrix::zeros(adv.rows(), adv.cols());
    let k = clean.cols();
    let (mut p, mut q) = (vec![0.0; k], vec![0.0; k]);
    for i in 0..clean.rows() {
        softmax_into(clean.row(i), &mut p);
        softmax_into(adv.row(i), &mut q);
        let (lp, lq) = (logsumexp(clean.row(i)), logsumexp(adv.row(i)));
        // v_k = log p_k - log q_k; dKL/dclean = p ⊙ (v - ⟨p, v⟩), dKL/dadv = q - p
        let v: Vec<f64> = (0..k).map(|j| (clean.get(i, j) - lp) - (adv.get(i, j) - lq)).collect();
        let pv: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
        let c_row = clean_grad.row_mut(i);
        for j in 0..k {
            c_row[j] += beta / n * p[j] * (v[j] - pv);
        }
        let a_row = adv_grad.row_mut(i);
        for j in 0..k {
            a_row[j] = beta / n * (q[j] - p[j]);
        }
    }
    Ok(ObjectiveValue { loss, clean_grad, adv_grad: Some(adv_grad) })
}

/// TRADES loss on a batch and its adversarial inputs.
pub fn trades_objective(model: &WeightSet, batch: &LabeledBatch, beta: f64, adv_inputs: &Matrix) -> Result<f64> {
    check_beta(beta)?;
    batch.inputs().check_same_shape(adv_inputs, "trades_objective")?;
    let clean = logits(model, batch.inputs())?;
    let adv = logits(model, adv_inputs)?;
    Ok(trades_from_logits(&clean, &adv, batch.labels(), beta)?.loss)
}

/// `min(family_a) - min(family_b)` over per-seed test risks.
pub fn generalization_gap(family_a: &[f64], family_b: &[f64]) -> Result<f64> {
    let best = |f: &[f64], name: &str| -> Result<f64> {
        if f.is_empty() {
            return Err(Error::Parameter(format!("{name} has no risks")));
        }
        Ok(f.iter().copied().fold(f64::INFINITY, f64::min))
    };
    Ok(best(family_a, "family a")? - best(family_b, "family b")?)
}

/// Rademacher generalization bound for a loss bounded in `[0, B]`:
/// `R̃ + 2B·ℜ + 3B·√(ln(2/δ) / 2n)`.
pub fn risk_bound(emp_risk: f64, bound: f64, rademacher: f64, delta: f64, n: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("delta must lie in (0, 1), got {delta}")));
    }
    if bound.is_nan() || bound <= 0.0 {
        return Err(Error::Parameter(format!("loss bound B must be positive, got {bound}")));
    }
    if n == 0 {
        return Err(Error::Parameter("sample count must be at least 1".into()));
    }
    Ok(emp_risk + 2.0 * bound * rademacher + 3.0 * bound * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}
