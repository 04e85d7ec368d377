//! Fisher-Rao norm of cross-entropy networks, logit-gap radius estimates,
//! the Rademacher complexity bounds built on them, and a Monte-Carlo
//! estimator of empirical Rademacher complexity over finite hypothesis sets.

use serde::Serialize;

use crate::dataset::LabeledBatch;
use crate::math::{rademacher_draw, softmax_into, Matrix, RngStream};
use crate::mlp::{logits, WeightSet};
use crate::objectives::correct_mask;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrNorm {
    /// `L·√mean(v²)` with `v = ⟨σ(f), f⟩ - f_y`.
    pub fr_norm: f64,
    /// `mean|v|`, the radius bounded above by the logit-gap estimate.
    pub radius: f64,
    /// `fr_norm / L`.
    pub rms_radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RadiusEstimates {
    pub gamma_hat: f64,
    pub gamma_hat_c: Option<f64>,
    pub gamma_hat_m: Option<f64>,
    pub n: usize,
    pub n_correct: usize,
    pub n_wrong: usize,
}

fn check_batch(logits: &Matrix, labels: &[usize], op: &'static str) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Parameter(format!("{op} needs a nonempty batch")));
    }
    if logits.rows() != labels.len() {
        return Err(Error::shape(op, format!("{} logit rows but {} labels", logits.rows(), labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Label { label, classes: logits.cols() });
    }
    Ok(())
}

/// Per-sample `⟨σ(f), f⟩ - f_y`.
pub fn fr_integrand(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_batch(logits, labels, "fr_integrand")?;
    let mut p = vec![0.0; logits.cols()];
    Ok(logits
        .row_iter()
        .zip(labels)
        .map(|(row, &y)| {
            softmax_into(row, &mut p);
            // centred at f_y so large logits do not cancel
            p.iter().zip(row).map(|(pk, fk)| pk * (fk - row[y])).sum()
        })
        .collect())
}

pub fn fr_from_logits(logits: &Matrix, labels: &[usize], depth: usize) -> Result<FrNorm> {
    let v = fr_integrand(logits, labels)?;
    let n = v.len() as f64;
    let rms_radius = (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let radius = v.iter().map(|x| x.abs()).sum::<f64>() / n;
    Ok(FrNorm { fr_norm: depth as f64 * rms_radius, radius, rms_radius })
}

pub fn fr_norm_ce(model: &WeightSet, batch: &LabeledBatch) -> Result<FrNorm> {
    fr_from_logits(&logits(model, batch.inputs())?, batch.labels(), model.depth())
}

/// Per-sample `max_{k≠y} |f_k - f_y|` (0 when `K = 1`).
pub fn logit_gaps(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_batch(logits, labels, "logit_gaps")?;
    Ok(logits
        .row_iter()
        .zip(labels)
        .map(|(row, &y)| row.iter().enumerate().filter(|&(k, _)| k != y).fold(0.0f64, |m, (_, &f)| m.max((f - row[y]).abs())))
        .collect())
}

pub fn radius_from_logits(logits: &Matrix, labels: &[usize]) -> Result<RadiusEstimates> {
    let gaps = logit_gaps(logits, labels)?;
    let mask = correct_mask(logits, labels);
    let (mut sum_c, mut sum_m, mut n_c, mut n_m) = (0.0, 0.0, 0usize, 0usize);
    for (g, c) in gaps.iter().zip(&mask) {
        if *c {
            sum_c += g;
            n_c += 1;
        } else {
            sum_m += g;
            n_m += 1;
        }
    }
    let n = gaps.len();
    let avg = |s: f64, k: usize| (k > 0).then(|| s / k as f64);
    Ok(RadiusEstimates {
        gamma_hat: gaps.iter().sum::<f64>() / n as f64,
        gamma_hat_c: avg(sum_c, n_c),
        gamma_hat_m: avg(sum_m, n_m),
        n,
        n_correct: n_c,
        n_wrong: n_m,
    })
}

pub fn radius_estimates(model: &WeightSet, batch: &LabeledBatch) -> Result<RadiusEstimates> {
    radius_from_logits(&logits(model, batch.inputs())?, batch.labels())
}

/// `(γ̂^C - γ̂^M) / γ̂^M`.
pub fn gamma_ce(est: &RadiusEstimates) -> Result<f64> {
    let c = est.gamma_hat_c.ok_or(Error::UndefinedMetric("gamma_ce: no correctly classified samples"))?;
    match est.gamma_hat_m {
        None => Err(Error::UndefinedMetric("gamma_ce: no misclassified samples")),
        Some(m) if m <= 0.0 => Err(Error::UndefinedMetric("gamma_ce: zero radius on misclassified samples")),
        Some(m) => Ok((c - m) / m),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundInputs {
    pub n: usize,
    pub n_correct: usize,
    pub n_wrong: usize,
    pub classes: usize,
    pub gamma_hat_m: f64,
    pub gamma_ce: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.n_correct == 0 || self.n_wrong == 0 {
            return Err(Error::Parameter(format!(
                "bounds need both subsets nonempty (correct {}, wrong {})",
                self.n_correct, self.n_wrong
            )));
        }
        if self.n_correct + self.n_wrong != self.n {
            return Err(Error::Parameter(format!("n = {} but n_correct + n_wrong = {}", self.n, self.n_correct + self.n_wrong)));
        }
        if self.classes < 2 {
            return Err(Error::Parameter(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(self.gamma_hat_m >= 0.0 && self.gamma_hat_m.is_finite()) || !self.gamma_ce.is_finite() {
            return Err(Error::Parameter("radius inputs must be finite and gamma_hat_m >= 0".into()));
        }
        Ok(())
    }

    /// Fills the bound inputs from training-set radius estimates.
    pub fn from_estimates(est: &RadiusEstimates, classes: usize) -> Result<Self> {
        let gamma_ce = gamma_ce(est)?;
        let b = BoundInputs {
            n: est.n,
            n_correct: est.n_correct,
            n_wrong: est.n_wrong,
            classes,
            gamma_hat_m: est.gamma_hat_m.unwrap_or(0.0),
            gamma_ce,
        };
        b.validate()?;
        Ok(b)
    }

    fn constants(&self) -> (f64, f64, f64) {
        let n = self.n as f64;
        let c_c = n / self.n_correct as f64;
        let c_m = n / self.n_wrong as f64;
        let c_mc = ((self.n_wrong as f64).sqrt() + (self.n_correct as f64).sqrt()) / n;
        (c_c, c_m, c_mc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn center(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

pub fn rademacher_bounds(b: &BoundInputs) -> Result<Bounds> {
    b.validate()?;
    let (c_c, c_m, c_mc) = b.constants();
    let centre = c_mc * (b.classes as f64).ln();
    let shared = b.gamma_hat_m * (b.gamma_ce / c_c + 1.0) / (b.n as f64).sqrt();
    Ok(Bounds { lower: centre - shared / c_c.sqrt(), upper: centre + shared / c_m.sqrt() })
}

/// Ratio of the upper bound's slope in `Γ` to the lower bound's (negated) slope.
pub fn bound_slope_ratio(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let (c_c, c_m, _) = b.constants();
    let common = b.gamma_hat_m / (c_c * (b.n as f64).sqrt());
    let d_upper = common / c_m.sqrt();
    let d_lower = -common / c_c.sqrt();
    if d_lower == 0.0 {
        // γ̂^M = 0 flattens both slopes; the ratio is still √(n_wrong / n_correct)
        return Ok((b.n_wrong as f64 / b.n_correct as f64).sqrt());
    }
    Ok(d_upper / -d_lower)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RademacherEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Monte-Carlo mean over `draws` sign vectors of `max_h (1/n) Σ ξ_i loss[h, i]`.
pub fn empirical_rademacher(loss_table: &Matrix, rng: &mut RngStream, draws: usize) -> Result<RademacherEstimate> {
    if loss_table.rows() == 0 || loss_table.cols() == 0 {
        return Err(Error::Parameter("empirical Rademacher needs a nonempty loss table".into()));
    }
    if draws == 0 {
        return Err(Error::Parameter("empirical Rademacher needs at least one draw".into()));
    }
    let n = loss_table.cols() as f64;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let xi = rademacher_draw(rng, loss_table.cols())?;
        let sup =
            loss_table.row_iter().map(|row| row.iter().zip(&xi).map(|(l, s)| l * s).sum::<f64>() / n).fold(f64::NEG_INFINITY, f64::max);
        sum += sup;
        sum_sq += sup * sup;
    }
    let d = draws as f64;
    let estimate = sum / d;
    let stderr = if draws > 1 { ((sum_sq - d * estimate * estimate).max(0.0) / (d - 1.0) / d).sqrt() } else { 0.0 };
    Ok(RademacherEstimate { estimate, stderr })
}
