//! Post-hoc analysis of sweep tables and logit dumps.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::dataset::Dump;
use crate::frn::{fr_from_logits, gamma_ce, rademacher_bounds, radius_from_logits, BoundInputs};
use crate::harness::table::Table;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// The smallest epoch budget in the table.
    Early,
    /// The largest epoch budget in the table.
    Late,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Regime::Early),
            "late" => Ok(Regime::Late),
            other => Err(Error::Parameter(format!("regime must be early or late, got {other:?}"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Early => "early",
            Regime::Late => "late",
        })
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::InsufficientData(format!("need >= 3 paired points, got {}", xs.len().min(ys.len()))));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InsufficientData("a variable has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Least-squares slope of `y = s·x` (no intercept).
pub fn slope_through_origin(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    if xs.len() != ys.len() || xs.is_empty() || sxx == 0.0 {
        return Err(Error::InsufficientData("slope needs at least one point with x != 0".into()));
    }
    Ok(xs.iter().zip(ys).map(|(x, y)| x * y).sum::<f64>() / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationPoint {
    pub width: usize,
    pub lambda: f64,
    /// Mean over seeds with a defined value.
    pub gamma_ce: f64,
    pub gap_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub n_points: usize,
    /// (width, λ) families dropped for an undefined Γce or gap.
    pub excluded: usize,
    pub epoch_regime: Regime,
    pub epoch_budget: usize,
    pub points: Vec<CorrelationPoint>,
}

pub const CORRELATE_COLUMNS: [&str; 6] = ["width", "lambda", "epoch_budget", "epoch", "gamma_ce", "gap_ce"];

/// Correlates Γce with the gap across (width, λ > 0) families at the final
/// epoch of the regime's budget.
pub fn correlate(table: &Table, regime: Regime) -> Result<CorrelationReport> {
    table.require(&CORRELATE_COLUMNS)?;
    let mut budgets = BTreeMap::new();
    for i in 0..table.len() {
        if let Some(b) = table.num(i, "epoch_budget")? {
            budgets.insert(b as usize, ());
        }
    }
    let budget = match regime {
        Regime::Early => budgets.keys().next(),
        Regime::Late => budgets.keys().next_back(),
    }
    .copied()
    .ok_or_else(|| Error::InsufficientData("table has no rows".into()))?;

    // (width, λ bits) → (Γce values, gap)
    let mut families: BTreeMap<(usize, u64), (Vec<f64>, Option<f64>)> = BTreeMap::new();
    for i in 0..table.len() {
        let at_budget = table.num(i, "epoch_budget")? == Some(budget as f64) && table.num(i, "epoch")? == Some(budget as f64);
        let lambda = table.num(i, "lambda")?.unwrap_or(0.0);
        if !at_budget || lambda <= 0.0 {
            continue;
        }
        let width = table.num(i, "width")?.unwrap_or(0.0) as usize;
        let entry = families.entry((width, lambda.to_bits())).or_default();
        if let Some(g) = table.num(i, "gamma_ce")? {
            entry.0.push(g);
        }
        if let Some(gap) = table.num(i, "gap_ce")? {
            entry.1 = Some(gap);
        }
    }
    let mut points = Vec::new();
    let mut excluded = 0;
    for ((width, lambda), (gammas, gap)) in families {
        match gap {
            Some(gap_ce) if !gammas.is_empty() => points.push(CorrelationPoint {
                width,
                lambda: f64::from_bits(lambda),
                gamma_ce: gammas.iter().sum::<f64>() / gammas.len() as f64,
                gap_ce,
            }),
            _ => excluded += 1,
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.gamma_ce).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.gap_ce).collect();
    Ok(CorrelationReport {
        pearson_r: pearson(&xs, &ys)?,
        spearman_rho: spearman(&xs, &ys)?,
        n_points: points.len(),
        excluded,
        epoch_regime: regime,
        epoch_budget: budget,
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeFit<K> {
    pub key: K,
    pub slope: f64,
    pub points: usize,
}

/// Through-origin slopes of γ̂^M against γ̂^C, grouped by width and by λ.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig2Slopes {
    pub by_width: Vec<SlopeFit<usize>>,
    pub by_lambda: Vec<SlopeFit<f64>>,
}

pub const FIG2_COLUMNS: [&str; 6] = ["run_id", "width", "lambda", "epoch", "gamma_hat_c", "gamma_hat_m"];

/// One (γ̂^C, γ̂^M) point per logged (run, epoch); budgets repeat rows, so
/// duplicates are dropped.
pub fn fig2_points(table: &Table) -> Result<Vec<(usize, f64, f64, f64)>> {
    table.require(&FIG2_COLUMNS)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in 0..table.len() {
        let run = table.text(i, "run_id").unwrap_or_default().to_owned();
        let epoch = table.num(i, "epoch")?.unwrap_or(0.0) as usize;
        if !seen.insert((run, epoch)) {
            continue;
        }
        if let (Some(c), Some(m)) = (table.num(i, "gamma_hat_c")?, table.num(i, "gamma_hat_m")?) {
            let width = table.num(i, "width")?.unwrap_or(0.0) as usize;
            let lambda = table.num(i, "lambda")?.unwrap_or(0.0);
            out.push((width, lambda, c, m));
        }
    }
    Ok(out)
}

pub fn fig2_slopes(table: &Table) -> Result<Fig2Slopes> {
    let points = fig2_points(table)?;
    let mut by_width: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut by_lambda: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for &(w, l, c, m) in &points {
        let e = by_width.entry(w).or_default();
        e.0.push(c);
        e.1.push(m);
        let e = by_lambda.entry(l.to_bits()).or_default();
        e.0.push(c);
        e.1.push(m);
    }
    let fit = |(xs, ys): &(Vec<f64>, Vec<f64>)| slope_through_origin(xs, ys).map(|s| (s, xs.len()));
    let mut widths = Vec::new();
    for (w, v) in &by_width {
        let (slope, points) = fit(v)?;
        widths.push(SlopeFit { key: *w, slope, points });
    }
    let mut lambdas = Vec::new();
    for (l, v) in &by_lambda {
        let (slope, points) = fit(v)?;
        lambdas.push(SlopeFit { key: f64::from_bits(*l), slope, points });
    }
    lambdas.sort_by(|a, b| a.key.total_cmp(&b.key));
    Ok(Fig2Slopes { by_width: widths, by_lambda: lambdas })
}

/// Radius estimates and bounds for a dump of logits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsReport {
    pub n: usize,
    pub classes: usize,
    pub n_correct: usize,
    pub n_wrong: usize,
    pub gamma_hat: f64,
    pub gamma_hat_c: Option<f64>,
    pub gamma_hat_m: Option<f64>,
    pub gamma_ce: Option<f64>,
    pub bound_lower: Option<f64>,
    pub bound_upper: Option<f64>,
    /// Mean |⟨σ(f), f⟩ − f_y|.
    pub fr_radius: f64,
    pub fr_rms_radius: f64,
}

pub fn bounds_report(dump: &Dump) -> Result<BoundsReport> {
    if dump.labels.is_empty() {
        return Err(Error::Parameter("dump holds no samples".into()));
    }
    if dump.values.cols() != dump.classes {
        return Err(Error::Parameter(format!(
            "dump rows have {} values but {} classes; expected one logit per class",
            dump.values.cols(),
            dump.classes
        )));
    }
    let est = radius_from_logits(&dump.values, &dump.labels)?;
    let fr = fr_from_logits(&dump.values, &dump.labels, 1)?;
    let bounds = BoundInputs::from_estimates(&est, dump.classes).and_then(|b| rademacher_bounds(&b)).ok();
    Ok(BoundsReport {
        n: est.n,
        classes: dump.classes,
        n_correct: est.n_correct,
        n_wrong: est.n_wrong,
        gamma_hat: est.gamma_hat,
        gamma_hat_c: est.gamma_hat_c,
        gamma_hat_m: est.gamma_hat_m,
        gamma_ce: gamma_ce(&est).ok(),
        bound_lower: bounds.map(|b| b.lower),
        bound_upper: bounds.map(|b| b.upper),
        fr_radius: fr.radius,
        fr_rms_radius: fr.rms_radius,
    })
}
