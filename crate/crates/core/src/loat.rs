//! Logit-oriented regularisation: probability-space penalties on correctly
//! and wrongly classified samples, adversarial probability pairing, and the
//! epoch schedule that switches their sign.
//!
//! All penalties read softmax outputs. Correctness masks are computed from
//! clean logits and treated as constants when differentiating.

use serde::{Deserialize, Serialize};

use crate::math::{softmax_rows, Matrix};
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Off,
    Slore,
    Lore,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoatSchedule {
    /// Last epoch (1-based, inclusive) of the early phase.
    pub e1: usize,
    /// First epoch (inclusive) of the late phase.
    pub e2: usize,
    pub tau: f64,
    pub gamma: f64,
    pub variant: Variant,
}

impl Default for LoatSchedule {
    fn default() -> Self {
        LoatSchedule { e1: 1, e2: 100, tau: DEFAULT_TAU, gamma: DEFAULT_GAMMA, variant: Variant::Off }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Early,
    Idle,
    Late,
}

impl LoatSchedule {
    pub fn off() -> Self {
        LoatSchedule::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.e1 > self.e2 {
            return Err(Error::Parameter(format!("E1 ({}) must not exceed E2 ({})", self.e1, self.e2)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if self.variant == Variant::Off {
            Phase::Idle
        } else if epoch <= self.e1 {
            Phase::Early
        } else if epoch >= self.e2 {
            Phase::Late
        } else {
            Phase::Idle
        }
    }

    /// True when the current phase uses adversarial pairing.
    pub fn pairs_logits(&self, epoch: usize) -> bool {
        self.variant == Variant::Lore && self.phase(epoch) != Phase::Idle
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PenaltyReport {
    pub p_c: Option<f64>,
    pub p_m: Option<f64>,
    pub p_c_lower: Option<f64>,
    pub p_m_lower: Option<f64>,
    pub ap_c: Option<f64>,
    pub ap_m: Option<f64>,
}

fn check_inputs(probs: &Matrix, labels: &[usize], mask: &[bool], op: &'static str) -> Result<()> {
    if probs.rows() != labels.len() || probs.rows() != mask.len() {
        return Err(Error::shape(op, format!("{} rows, {} labels, {} mask entries", probs.rows(), labels.len(), mask.len())));
    }
    if probs.cols() < 2 {
        return Err(Error::Parameter(format!("{op} needs at least 2 classes")));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(Error::Label { label, classes: probs.cols() });
    }
    Ok(())
}

/// Mean of the non-label probabilities.
fn off_label_mean(p: &[f64], y: usize) -> f64 {
    let s: f64 = p.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, &v)| v).sum();
    s / (p.len() - 1) as f64
}

/// `(1/(K-1)) Σ_{k≠y} (p_k - p_y)²`.
fn gap_term(p: &[f64], y: usize) -> f64 {
    let s: f64 = p.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, &v)| (v - p[y]).powi(2)).sum();
    s / (p.len() - 1) as f64
}

/// `(1/(K-1)) Σ_{k≠y} (p_k - μ)²` with `μ` the off-label mean.
fn spread_term(p: &[f64], y: usize) -> f64 {
    let mu = off_label_mean(p, y);
    let s: f64 = p.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, &v)| (v - mu).powi(2)).sum();
    s / (p.len() - 1) as f64
}

/// Averages `f` over rows where `mask == want`.
fn subset_mean(probs: &Matrix, labels: &[usize], mask: &[bool], want: bool, f: impl Fn(&[f64], usize) -> f64) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if m == want {
            sum += f(probs.row(i), y);
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// `(P_C, P̌_C)` over the samples flagged correct.
pub fn penalty_correct(probs: &Matrix, labels: &[usize], correct_mask: &[bool]) -> Result<(f64, f64)> {
    check_inputs(probs, labels, correct_mask, "penalty_correct")?;
    let full = subset_mean(probs, labels, correct_mask, true, gap_term).ok_or(Error::EmptySubset("correct"))?;
    let lower = subset_mean(probs, labels, correct_mask, true, spread_term).ok_or(Error::EmptySubset("correct"))?;
    Ok((full, lower))
}

/// `(P_M, P̌_M)` over the samples flagged wrong.
pub fn penalty_wrong(probs: &Matrix, labels: &[usize], correct_mask: &[bool]) -> Result<(f64, f64)> {
    check_inputs(probs, labels, correct_mask, "penalty_wrong")?;
    let full = subset_mean(probs, labels, correct_mask, false, gap_term).ok_or(Error::EmptySubset("wrong"))?;
    let lower = subset_mean(probs, labels, correct_mask, false, spread_term).ok_or(Error::EmptySubset("wrong"))?;
    Ok((full, lower))
}

/// Intermediate Jensen term `(mean_{k≠y} p_k - p_y)²` averaged over wrong samples;
/// never exceeds `P_M`.
pub fn jensen_middle_wrong(probs: &Matrix, labels: &[usize], correct_mask: &[bool]) -> Result<f64> {
    check_inputs(probs, labels, correct_mask, "jensen_middle_wrong")?;
    subset_mean(probs, labels, correct_mask, false, |p, y| (off_label_mean(p, y) - p[y]).powi(2)).ok_or(Error::EmptySubset("wrong"))
}

/// Mean over masked rows of `‖p_clean - p_adv‖²`.
pub fn adversarial_pairing(clean_probs: &Matrix, adv_probs: &Matrix, mask: &[bool]) -> Result<f64> {
    clean_probs.check_same_shape(adv_probs, "adversarial_pairing")?;
    if mask.len() != clean_probs.rows() {
        return Err(Error::shape("adversarial_pairing", format!("{} rows but {} mask entries", clean_probs.rows(), mask.len())));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sum += clean_probs.row(i).iter().zip(adv_probs.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptySubset("pairing"));
    }
    Ok(sum / count as f64)
}

fn present<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptySubset(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Every penalty on one batch; subsets that are empty leave their fields `None`.
pub fn penalty_report(probs: &Matrix, labels: &[usize], correct_mask: &[bool], adv_probs: Option<&Matrix>) -> Result<PenaltyReport> {
    let c = present(penalty_correct(probs, labels, correct_mask))?;
    let m = present(penalty_wrong(probs, labels, correct_mask))?;
    let (ap_c, ap_m) = match adv_probs {
        Some(adv) => {
            let wrong: Vec<bool> = correct_mask.iter().map(|c| !c).collect();
            (present(adversarial_pairing(probs, adv, correct_mask))?, present(adversarial_pairing(probs, adv, &wrong))?)
        }
        None => (None, None),
    };
    Ok(PenaltyReport { p_c: c.map(|v| v.0), p_c_lower: c.map(|v| v.1), p_m: m.map(|v| v.0), p_m_lower: m.map(|v| v.1), ap_c, ap_m })
}

/// Scheduled penalty added on top of the base loss; exactly 0 when idle.
pub fn loat_term(epoch: usize, sched: &LoatSchedule, pr: &PenaltyReport) -> f64 {
    let pc = pr.p_c_lower.unwrap_or(0.0);
    let pm = pr.p_m_lower.unwrap_or(0.0);
    let lore = sched.variant == Variant::Lore;
    match sched.phase(epoch) {
        Phase::Idle => 0.0,
        Phase::Early => {
            let t = sched.tau * (pc - pm);
            match pr.ap_m {
                Some(ap) if lore => t + sched.gamma * ap,
                _ => t,
            }
        }
        Phase::Late => {
            let t = sched.tau * (pm - pc);
            match pr.ap_c {
                Some(ap) if lore => t + sched.gamma * ap,
                _ => t,
            }
        }
    }
}

pub fn loat_loss(base_loss: f64, epoch: usize, sched: &LoatSchedule, pr: &PenaltyReport) -> f64 {
    match sched.phase(epoch) {
        Phase::Idle => base_loss,
        _ => base_loss + loat_term(epoch, sched, pr),
    }
}

/// Gradients of [`loat_term`] with respect to clean and adversarial logits.
#[derive(Clone, Debug)]
pub struct LoatGrad {
    pub clean: Matrix,
    /// Present when adversarial pairing is active this epoch.
    pub adv: Option<Matrix>,
}

/// Pulls a probability-space gradient back through the softmax:
/// `g_z = p ⊙ (g_p - ⟨p, g_p⟩)`, row by row.
fn through_softmax(probs: &Matrix, g_probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let (p, g) = (probs.row(i), g_probs.row(i));
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (pj, gj)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pj * (gj - inner);
        }
    }
    out
}

/// Adds `weight · ∂P̌/∂p` (subset mean) for rows where `mask == want`.
fn add_spread_grad(g: &mut Matrix, probs: &Matrix, labels: &[usize], mask: &[bool], want: bool, weight: f64) {
    let count = mask.iter().filter(|&&m| m == want).count();
    if count == 0 || weight == 0.0 {
        return;
    }
    let k1 = (probs.cols() - 1) as f64;
    let scale = weight * 2.0 / (k1 * count as f64);
    for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if m != want {
            continue;
        }
        let p = probs.row(i);
        let mu = off_label_mean(p, y);
        for (j, gj) in g.row_mut(i).iter_mut().enumerate() {
            if j != y {
                *gj += scale * (p[j] - mu);
            }
        }
    }
}

/// Adds `weight · ∂AP/∂p` and `∂AP/∂q` for rows where `mask == want`.
fn add_pairing_grad(g_clean: &mut Matrix, g_adv: &mut Matrix, probs: &Matrix, adv_probs: &Matrix, mask: &[bool], want: bool, weight: f64) {
    let count = mask.iter().filter(|&&m| m == want).count();
    if count == 0 || weight == 0.0 {
        return;
    }
    let scale = 2.0 * weight / count as f64;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m == want) {
        for j in 0..probs.cols() {
            let d = scale * (probs.get(i, j) - adv_probs.get(i, j));
            g_clean.row_mut(i)[j] += d;
            g_adv.row_mut(i)[j] -= d;
        }
    }
}

pub fn loat_grad_contrib(
    clean_logits: &Matrix,
    labels: &[usize],
    correct_mask: &[bool],
    adv_logits: Option<&Matrix>,
    epoch: usize,
    sched: &LoatSchedule,
) -> Result<LoatGrad> {
    let (n, k) = clean_logits.shape();
    let pairing = sched.pairs_logits(epoch) && adv_logits.is_some();
    let zero = || LoatGrad { clean: Matrix::zeros(n, k), adv: pairing.then(|| Matrix::zeros(n, k)) };
    let phase = sched.phase(epoch);
    if phase == Phase::Idle {
        return Ok(zero());
    }
    let probs = softmax_rows(clean_logits);
    check_inputs(&probs, labels, correct_mask, "loat_grad_contrib")?;
    let sign = if phase == Phase::Early { 1.0 } else { -1.0 };

    let mut g = Matrix::zeros(n, k);
    add_spread_grad(&mut g, &probs, labels, correct_mask, true, sign * sched.tau);
    add_spread_grad(&mut g, &probs, labels, correct_mask, false, -sign * sched.tau);

    let adv = match adv_logits {
        Some(adv_logits) if pairing => {
            clean_logits.check_same_shape(adv_logits, "loat_grad_contrib")?;
            let adv_probs = softmax_rows(adv_logits);
            let mut g_adv = Matrix::zeros(n, k);
            // early phase pairs the wrong subset, late phase the correct one
            let want = phase == Phase::Late;
            add_pairing_grad(&mut g, &mut g_adv, &probs, &adv_probs, correct_mask, want, sched.gamma);
            Some(through_softmax(&adv_probs, &g_adv))
        }
        _ => None,
    };
    Ok(LoatGrad { clean: through_softmax(&probs, &g), adv })
}
