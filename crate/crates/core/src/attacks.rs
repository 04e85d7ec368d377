//! Inner maximisation of the adversarial objective: FGSM and PGD on the
//! cross-entropy loss, constrained to an ℓ∞ or ℓ2 ball around each clean
//! input and to the unit cube.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledBatch;
use crate::math::{Matrix, RngStream};
use crate::mlp::{forward, input_gradient, logits, WeightSet};
use crate::objectives::{ce_logit_grad, ce_loss};
use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;
pub const DEFAULT_STEP_SIZE: f64 = 2.0 / 255.0;
pub const DEFAULT_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Inf,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    /// Return the per-sample best iterate (clean input included) instead of
    /// the last one.
    pub track_best: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            norm: Norm::Inf,
            epsilon: DEFAULT_EPSILON,
            step_size: DEFAULT_STEP_SIZE,
            steps: DEFAULT_STEPS,
            random_start: false,
            track_best: true,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Parameter(format!("step size must be > 0, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(Error::Parameter("PGD needs at least one step".into()));
        }
        Ok(())
    }

    /// One saturated signed step, equivalent to [`fgsm`].
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec { norm: Norm::Inf, epsilon, step_size: epsilon, steps: 1, random_start: false, track_best: false }
    }

    pub fn is_fgsm(&self) -> bool {
        self.norm == Norm::Inf && self.steps == 1 && self.step_size >= self.epsilon && !self.random_start && !self.track_best
    }

    /// Short label such as `pgd10-linf` for reports.
    pub fn label(&self) -> String {
        if self.is_fgsm() {
            return "fgsm".into();
        }
        let norm = match self.norm {
            Norm::Inf => "linf",
            Norm::Two => "l2",
        };
        format!("pgd{}-{norm}", self.steps)
    }
}

/// Projects `x` onto the `ε`-ball around `x0` and then onto `[0, 1]`.
pub fn project(x0: &Matrix, x: &Matrix, norm: Norm, epsilon: f64) -> Result<Matrix> {
    x0.check_same_shape(x, "project")?;
    let mut out = x.clone();
    match norm {
        Norm::Inf => {
            for (o, &c) in out.as_mut_slice().iter_mut().zip(x0.as_slice()) {
                *o = o.clamp(c - epsilon, c + epsilon).clamp(0.0, 1.0);
            }
        }
        Norm::Two => {
            for i in 0..x0.rows() {
                let centre = x0.row(i);
                let row = out.row_mut(i);
                let norm: f64 = row.iter().zip(centre).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let shrink = if norm > epsilon { epsilon / norm } else { 1.0 };
                for (o, &c) in row.iter_mut().zip(centre) {
                    *o = (c + (*o - c) * shrink).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-sample input gradient of CE and the per-sample losses at `x`.
fn loss_and_input_grad(model: &WeightSet, x: &Matrix, labels: &[usize]) -> Result<(Vec<f64>, Matrix)> {
    let trace = forward(model, x)?;
    let losses = ce_loss(trace.logits(), labels)?.per_sample;
    let g = ce_logit_grad(trace.logits(), labels)?;
    Ok((losses, input_gradient(model, &trace, &g)?))
}

fn ascent_step(x: &mut Matrix, grad: &Matrix, norm: Norm, alpha: f64) {
    match norm {
        Norm::Inf => {
            for (v, &g) in x.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *v += alpha * sign(g);
            }
        }
        Norm::Two => {
            for i in 0..x.rows() {
                let g = grad.row(i);
                let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    for (v, &gj) in x.row_mut(i).iter_mut().zip(g) {
                        *v += alpha * gj / n;
                    }
                }
            }
        }
    }
}

/// Single signed step of size `ε`, clipped to `[0, 1]`.
pub fn fgsm(model: &WeightSet, batch: &LabeledBatch, epsilon: f64) -> Result<Matrix> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let x0 = batch.inputs();
    let (_, grad) = loss_and_input_grad(model, x0, batch.labels())?;
    let mut x = x0.clone();
    ascent_step(&mut x, &grad, Norm::Inf, epsilon);
    project(x0, &x, Norm::Inf, epsilon)
}

fn random_start(x0: &Matrix, norm: Norm, epsilon: f64, rng: &mut RngStream) -> Result<Matrix> {
    let mut x = x0.clone();
    match norm {
        Norm::Inf => {
            for v in x.as_mut_slice() {
                *v += epsilon * (2.0 * rng.uniform() - 1.0);
            }
        }
        Norm::Two => {
            let d = x0.cols();
            for i in 0..x0.rows() {
                let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let r = epsilon * rng.uniform().powf(1.0 / d as f64);
                for (v, u) in x.row_mut(i).iter_mut().zip(&dir) {
                    *v += r * u / n;
                }
            }
        }
    }
    project(x0, &x, norm, epsilon)
}

/// Keeps, per sample, whichever of `best` / `candidate` has the larger loss.
fn keep_better(best: &mut Matrix, best_loss: &mut [f64], candidate: &Matrix, losses: &[f64]) {
    for (i, (&l, b)) in losses.iter().zip(best_loss.iter_mut()).enumerate() {
        if l > *b {
            *b = l;
            best.row_mut(i).copy_from_slice(candidate.row(i));
        }
    }
}

/// `k`-step projected gradient ascent on the per-sample cross-entropy.
pub fn pgd(model: &WeightSet, batch: &LabeledBatch, spec: &AttackSpec, rng: &mut RngStream) -> Result<Matrix> {
    spec.validate()?;
    let x0 = batch.inputs();
    let labels = batch.labels();
    let mut x = if spec.random_start && spec.epsilon > 0.0 { random_start(x0, spec.norm, spec.epsilon, rng)? } else { x0.clone() };

    let mut best = x0.clone();
    let mut best_loss = if spec.track_best { ce_loss(&logits(model, x0)?, labels)?.per_sample } else { Vec::new() };

    for _ in 0..spec.steps {
        let (losses, grad) = loss_and_input_grad(model, &x, labels)?;
        if spec.track_best {
            keep_better(&mut best, &mut best_loss, &x, &losses);
        }
        ascent_step(&mut x, &grad, spec.norm, spec.step_size);
        x = project(x0, &x, spec.norm, spec.epsilon)?;
    }

    if !spec.track_best {
        return Ok(x);
    }
    let losses = ce_loss(&logits(model, &x)?, labels)?.per_sample;
    keep_better(&mut best, &mut best_loss, &x, &losses);
    Ok(best)
}
