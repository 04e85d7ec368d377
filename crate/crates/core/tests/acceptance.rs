//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.
//!
//! `cargo test -p loat-core --test acceptance -- 3 7` runs a subset. The
//! MNIST sweep behind criteria 8 and 9 takes about an hour on one core; its
//! CSV is cached under the cargo target tmp directory keyed by a hash of the
//! sweep config, the data fingerprints and the crate version. Set
//! `LOAT_ACCEPTANCE_FRESH=1` to ignore the cache.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use loat_core::attacks::{pgd, AttackSpec, Norm};
use loat_core::dataset::{DatasetHandle, LabeledBatch};
use loat_core::frn::{bound_slope_ratio, empirical_rademacher, fr_norm_ce, rademacher_bounds, radius_estimates, BoundInputs};
use loat_core::harness::analysis::{correlate, fig2_slopes, CorrelationReport, Regime};
use loat_core::harness::config::{parse_json, DataConfig, SweepConfig};
use loat_core::harness::manifest::{blob_hash, DatasetFingerprint};
use loat_core::harness::sweep::run_sweep;
use loat_core::harness::table::{read_rows, write_rows, Table};
use loat_core::loat::{jensen_middle_wrong, loat_grad_contrib, penalty_correct, penalty_wrong, LoatSchedule, Variant};
use loat_core::math::{Matrix, RngStream};
use loat_core::mlp::{forward, init, weight_gradients, InitScale, MlpConfig, WeightSet};
use loat_core::objectives::{mixture_from_logits, ObjectiveSpec};
use loat_core::trainer::{TrainConfig, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k")
}

fn mnist(train_limit: Option<usize>, test_limit: Option<usize>) -> DatasetHandle {
    DataConfig::Idx { dir: mnist_dir(), train_limit, test_limit }.load(Path::new(".")).expect("MNIST subset under data/mnist5k")
}

fn uniform_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform()).collect()).unwrap()
}

fn random_mlp(rng: &mut RngStream, widths: &[usize], scale: f64) -> WeightSet {
    init(&MlpConfig { layer_widths: widths.to_vec(), seed: rng.next_u64(), init: InitScale::Fixed(scale) }).unwrap()
}

// ---------------------------------------------------------------------------
// Independent oracles for criterion 1: naive loops, no shared code with the
// library's softmax, matmul or penalty implementations.

/// Logits and the smallest |pre-activation| seen in hidden layers.
fn naive_logits(layers: &[Matrix], x: &Matrix) -> (Vec<Vec<f64>>, f64) {
    let mut min_pre = f64::INFINITY;
    let mut out = Vec::new();
    for i in 0..x.rows() {
        let mut a: Vec<f64> = x.row(i).to_vec();
        for (l, w) in layers.iter().enumerate() {
            let mut z = vec![0.0; w.rows()];
            for (r, zr) in z.iter_mut().enumerate() {
                for (c, ac) in a.iter().enumerate() {
                    *zr += w.get(r, c) * ac;
                }
            }
            if l + 1 < layers.len() {
                for v in &mut z {
                    min_pre = min_pre.min(v.abs());
                    *v = v.max(0.0);
                }
            }
            a = z;
        }
        out.push(a);
    }
    (out, min_pre)
}

fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn naive_ce(f: &[Vec<f64>], y: &[usize]) -> f64 {
    let total: f64 = f
        .iter()
        .zip(y)
        .map(|(z, &t)| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[t]
        })
        .sum();
    total / y.len() as f64
}

/// `(1/(K-1)) Σ_{k≠y} (p_k - μ)²` with μ the off-label mean, averaged over the subset.
fn naive_spread(f: &[Vec<f64>], y: &[usize], mask: &[bool], want: bool) -> f64 {
    let (mut sum, mut count) = (0.0, 0);
    for (i, z) in f.iter().enumerate() {
        if mask[i] != want {
            continue;
        }
        let p = naive_softmax(z);
        let k = p.len() as f64;
        let mu = (0..p.len()).filter(|&j| j != y[i]).map(|j| p[j]).sum::<f64>() / (k - 1.0);
        let s: f64 = (0..p.len()).filter(|&j| j != y[i]).map(|j| (p[j] - mu).powi(2)).sum();
        sum += s / (k - 1.0);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn naive_pairing(f: &[Vec<f64>], fa: &[Vec<f64>], mask: &[bool], want: bool) -> f64 {
    let (mut sum, mut count) = (0.0, 0);
    for i in 0..f.len() {
        if mask[i] == want {
            let (p, q) = (naive_softmax(&f[i]), naive_softmax(&fa[i]));
            sum += p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Clone, Copy, Debug)]
enum Scalar {
    Ce,
    Mixture(f64),
    /// Scheduled penalty with (variant, τ, γ, late?) under a fixed mask.
    Loat(Variant, f64, f64, bool),
}

struct GradCase {
    w: WeightSet,
    x: Matrix,
    xa: Matrix,
    y: Vec<usize>,
    mask: Vec<bool>,
}

fn scalar_value(case: &GradCase, layers: &[Matrix], s: Scalar) -> f64 {
    let (f, _) = naive_logits(layers, &case.x);
    let (fa, _) = naive_logits(layers, &case.xa);
    match s {
        Scalar::Ce => naive_ce(&f, &case.y),
        Scalar::Mixture(l) => (1.0 - l) * naive_ce(&f, &case.y) + l * naive_ce(&fa, &case.y),
        Scalar::Loat(variant, tau, gamma, late) => {
            let pc = naive_spread(&f, &case.y, &case.mask, true);
            let pm = naive_spread(&f, &case.y, &case.mask, false);
            let lore = variant == Variant::Lore;
            if late {
                tau * (pm - pc) + if lore { gamma * naive_pairing(&f, &fa, &case.mask, true) } else { 0.0 }
            } else {
                tau * (pc - pm) + if lore { gamma * naive_pairing(&f, &fa, &case.mask, false) } else { 0.0 }
            }
        }
    }
}

fn analytic(case: &GradCase, s: Scalar) -> Vec<f64> {
    let tc = forward(&case.w, &case.x).unwrap();
    let ta = forward(&case.w, &case.xa).unwrap();
    let (gc, ga) = match s {
        Scalar::Ce => (mixture_from_logits(tc.logits(), None, &case.y, 0.0).unwrap().clean_grad, None),
        Scalar::Mixture(l) => {
            let v = mixture_from_logits(tc.logits(), Some(ta.logits()), &case.y, l).unwrap();
            (v.clean_grad, v.adv_grad)
        }
        Scalar::Loat(variant, tau, gamma, late) => {
            let sched = LoatSchedule { e1: 2, e2: 8, tau, gamma, variant };
            let epoch = if late { 9 } else { 1 };
            let g = loat_grad_contrib(tc.logits(), &case.y, &case.mask, Some(ta.logits()), epoch, &sched).unwrap();
            (g.clean, g.adv)
        }
    };
    let mut grads = weight_gradients(&case.w, &tc, &gc).unwrap();
    if let Some(ga) = ga {
        grads.add_scaled(&weight_gradients(&case.w, &ta, &ga).unwrap(), 1.0).unwrap();
    }
    grads.layers().iter().flat_map(|m| m.as_slice().to_vec()).collect()
}

fn numeric(case: &GradCase, s: Scalar, h: f64) -> Vec<f64> {
    let mut layers: Vec<Matrix> = case.w.layers().to_vec();
    let mut out = Vec::new();
    for l in 0..layers.len() {
        for idx in 0..layers[l].as_slice().len() {
            let orig = layers[l].as_slice()[idx];
            layers[l].as_mut_slice()[idx] = orig + h;
            let up = scalar_value(case, &layers, s);
            layers[l].as_mut_slice()[idx] = orig - h;
            let down = scalar_value(case, &layers, s);
            layers[l].as_mut_slice()[idx] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn grad_case(rng: &mut RngStream) -> GradCase {
    loop {
        let hidden = 1 + rng.index(3);
        let d = 2 + rng.index(7);
        let k = 2 + rng.index(4);
        let mut widths = vec![d];
        widths.extend((0..hidden).map(|_| 2 + rng.index(15)));
        widths.push(k);
        let n = 1 + rng.index(8);
        let w = random_mlp(rng, &widths, 0.8);
        let x = uniform_matrix(rng, n, d);
        let xa = uniform_matrix(rng, n, d);
        let (_, m1) = naive_logits(w.layers(), &x);
        let (_, m2) = naive_logits(w.layers(), &xa);
        // keep every hidden unit well away from the ReLU kink
        if m1.min(m2) < 1e-3 {
            continue;
        }
        let y = (0..n).map(|_| rng.index(k)).collect();
        let mask = (0..n).map(|_| rng.uniform() < 0.5).collect();
        return GradCase { w, x, xa, y, mask };
    }
}

fn criterion_1() -> Outcome {
    let mut rng = RngStream::new(101);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let cases = 24;
    for _ in 0..cases {
        let mut case = grad_case(&mut rng);
        let lambda = 0.1 + 0.8 * rng.uniform();
        let n = case.y.len();
        let mut scalars = vec![(Scalar::Ce, None), (Scalar::Mixture(lambda), None)];
        // each penalty alone: masks select the subset, τ / γ select the term
        scalars.push((Scalar::Loat(Variant::Slore, 1.0, 0.0, false), Some(vec![true; n])));
        scalars.push((Scalar::Loat(Variant::Slore, 1.0, 0.0, true), Some(vec![false; n])));
        scalars.push((Scalar::Loat(Variant::Lore, 0.0, 1.0, false), Some(vec![false; n])));
        scalars.push((Scalar::Loat(Variant::Lore, 0.0, 1.0, true), Some(vec![true; n])));
        // the full schedule on a mixed mask
        scalars.push((Scalar::Loat(Variant::Lore, 1.0, 0.05, false), None));
        scalars.push((Scalar::Loat(Variant::Lore, 1.0, 0.05, true), None));
        let mixed = case.mask.clone();
        for (s, mask) in scalars {
            case.mask = mask.unwrap_or_else(|| mixed.clone());
            let e = rel_error(&analytic(&case, s), &numeric(&case, s, 1e-5));
            worst = worst.max(e);
            checks += 1;
        }
    }
    outcome(
        worst <= 1e-5,
        format!("{cases} random MLPs, {checks} gradient checks (CE, mixture, P_C lower, P_M lower, AP_M, AP_C, full schedule); max relative error {worst:.2e} (limit 1e-5)"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = RngStream::new(202);
    let (mut violations, mut worst) = (0, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let d = 1 + rng.index(12);
        let k = 2 + rng.index(9);
        let mut widths = vec![d];
        widths.extend((0..rng.index(4)).map(|_| 1 + rng.index(32)));
        widths.push(k);
        let scale = 0.1 + 3.0 * rng.uniform();
        let w = random_mlp(&mut rng, &widths, scale);
        let n = 1 + rng.index(32);
        let b = LabeledBatch::new(uniform_matrix(&mut rng, n, d), (0..n).map(|_| rng.index(k)).collect(), k).unwrap();
        let radius = fr_norm_ce(&w, &b).unwrap().radius;
        let gamma = radius_estimates(&w, &b).unwrap().gamma_hat;
        worst = worst.max(radius - gamma);
        if radius > gamma + 1e-9 {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("1000 random (model, batch) pairs; {violations} violations; max(radius - gamma_hat) = {worst:.3e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = RngStream::new(303);
    let (mut v_c, mut v_m, mut checked) = (0, 0, 0);
    // both inequalities are tight when the off-label probabilities agree;
    // there the two sides may round apart by an ulp or two
    let slack = |v: f64| 4.0 * f64::EPSILON * v.abs();
    let mut excess = f64::NEG_INFINITY;
    for t in 0..10_000 {
        let n = 1 + rng.index(16);
        let k = 2 + rng.index(9);
        let scale = [0.1, 1.0, 5.0, 20.0][t % 4];
        let mut p = Matrix::zeros(n, k);
        for i in 0..n {
            let z: Vec<f64> = (0..k).map(|_| scale * rng.normal()).collect();
            p.row_mut(i).copy_from_slice(&naive_softmax(&z));
        }
        let y: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
        if mask.iter().any(|&m| m) {
            let (full, lower) = penalty_correct(&p, &y, &mask).unwrap();
            excess = excess.max(lower - full);
            v_c += (lower > full + slack(full)) as usize;
        }
        if mask.iter().any(|&m| !m) {
            let (full, _) = penalty_wrong(&p, &y, &mask).unwrap();
            let middle = jensen_middle_wrong(&p, &y, &mask).unwrap();
            excess = excess.max(middle - full);
            v_m += (middle > full + slack(full)) as usize;
        }
        checked += 1;
    }
    outcome(v_c + v_m == 0, format!("{checked} random probability matrices; P_C lower > P_C: {v_c}; Jensen middle > P_M: {v_m}; largest excess {excess:.1e} (4 ulp rounding allowance)"))
}

fn direct_bounds(n: f64, nc: f64, nw: f64, k: f64, gm: f64, g: f64) -> (f64, f64) {
    let c_c = n / nc;
    let c_m = n / nw;
    let c_mc = (nw.sqrt() + nc.sqrt()) / n;
    let lower = c_mc * k.ln() - gm * c_c.powf(-0.5) * (g / c_c + 1.0) / n.sqrt();
    let upper = c_mc * k.ln() + gm * c_m.powf(-0.5) * (g / c_c + 1.0) / n.sqrt();
    (lower, upper)
}

fn criterion_4() -> Outcome {
    let b = BoundInputs { n: 100, n_correct: 50, n_wrong: 50, classes: 10, gamma_hat_m: 1.0, gamma_ce: 0.0 };
    let got = rademacher_bounds(&b).unwrap();
    let (lo, hi) = direct_bounds(100.0, 50.0, 50.0, 10.0, 1.0, 0.0);
    let worked = (got.lower - lo).abs() <= 1e-6 && (got.upper - hi).abs() <= 1e-6;
    let near_published = (got.lower - 0.25494).abs() < 5e-5 && (got.upper - 0.39636).abs() < 5e-5;

    let mut worst: f64 = 0.0;
    let mut points = 0;
    for nc in [1usize, 3, 10, 37, 90] {
        for (gm, gamma) in [(0.5, -0.3), (1.0, 0.0), (2.0, 0.7), (4.0, 3.0)] {
            let n = 100;
            let b = BoundInputs { n, n_correct: nc, n_wrong: n - nc, classes: 10, gamma_hat_m: gm, gamma_ce: gamma };
            let expected = ((n - nc) as f64 / nc as f64).sqrt();
            worst = worst.max((bound_slope_ratio(&b).unwrap() - expected).abs());
            // the ratio also follows from the direct formula's Γ-slopes
            let (l0, u0) = direct_bounds(n as f64, nc as f64, (n - nc) as f64, 10.0, gm, gamma);
            let (l1, u1) = direct_bounds(n as f64, nc as f64, (n - nc) as f64, 10.0, gm, gamma + 1.0);
            worst = worst.max(((u1 - u0) / (l0 - l1) - expected).abs() / expected.max(1.0));
            points += 1;
        }
    }
    outcome(
        worked && near_published && worst <= 1e-9,
        format!(
            "worked bounds ({:.6}, {:.6}) vs direct ({lo:.6}, {hi:.6}); slope ratio max error {worst:.1e} over {points} grid points",
            got.lower, got.upper
        ),
    )
}

fn exhaustive_rademacher(table: &Matrix) -> f64 {
    let n = table.cols();
    let mut total = 0.0;
    for bits in 0u32..(1 << n) {
        let mut best = f64::NEG_INFINITY;
        for h in 0..table.rows() {
            let mut s = 0.0;
            for i in 0..n {
                s += if bits >> i & 1 == 1 { table.get(h, i) } else { -table.get(h, i) };
            }
            best = best.max(s / n as f64);
        }
        total += best;
    }
    total / (1u64 << n) as f64
}

fn criterion_5() -> Outcome {
    let mut rng = RngStream::new(505);
    let mut worst_z: f64 = 0.0;
    let mut tables = 0;
    for n in [2usize, 5, 8, 12] {
        for h in 1..=3 {
            let table = uniform_matrix(&mut rng, h, n);
            let exact = exhaustive_rademacher(&table);
            let est = empirical_rademacher(&table, &mut rng, 100_000).unwrap();
            worst_z = worst_z.max((est.estimate - exact).abs() / est.stderr);
            tables += 1;
        }
    }
    outcome(
        worst_z <= 3.0,
        format!("{tables} tables (n <= 12, h <= 3), 1e5 draws each; max |estimate - exact| = {worst_z:.2} standard errors"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = RngStream::new(606);
    let (mut worst, mut invariant_breaks) = (f64::INFINITY, 0);
    for _ in 0..100 {
        let d = 1 + rng.index(12);
        let k = 2 + rng.index(9);
        let scale = 0.5 + 3.0 * rng.uniform();
        let w = WeightSet::new(vec![Matrix::from_vec(k, d, (0..k * d).map(|_| scale * rng.normal()).collect()).unwrap()]).unwrap();
        let x0 = uniform_matrix(&mut rng, 1, d);
        let y = rng.index(k);
        let eps = 8.0 / 255.0;
        let lo: Vec<f64> = x0.row(0).iter().map(|v| (v - eps).max(0.0)).collect();
        let hi: Vec<f64> = x0.row(0).iter().map(|v| (v + eps).min(1.0)).collect();
        let ce = |x: &[f64]| naive_ce(&naive_logits(w.layers(), &Matrix::from_vec(1, d, x.to_vec()).unwrap()).0, &[y]);
        let mut best = f64::NEG_INFINITY;
        for corner in 0u32..(1 << d) {
            let x: Vec<f64> = (0..d).map(|j| if corner >> j & 1 == 1 { hi[j] } else { lo[j] }).collect();
            best = best.max(ce(&x));
        }
        let spec = AttackSpec { norm: Norm::Inf, epsilon: eps, step_size: eps / 4.0, steps: 10, random_start: false, track_best: true };
        let b = LabeledBatch::new(x0.clone(), vec![y], k).unwrap();
        let adv = pgd(&w, &b, &spec, &mut RngStream::new(0)).unwrap();
        for (a, o) in adv.row(0).iter().zip(x0.row(0)) {
            if !(*a >= o - eps && *a <= o + eps && (0.0..=1.0).contains(a)) {
                invariant_breaks += 1;
            }
        }
        worst = worst.min(ce(adv.row(0)) / best);
    }
    outcome(
        worst >= 0.99 && invariant_breaks == 0,
        format!("100 linear models (d <= 12, K <= 10, eps 8/255); worst PGD / corner-search CE = {worst:.5} (limit 0.99); {invariant_breaks} ball or box violations"),
    )
}

fn criterion_7() -> Outcome {
    let data = mnist(Some(512), Some(64));
    let base = TrainConfig {
        hidden_widths: vec![32],
        objective: ObjectiveSpec::Mixture { lambda: 1.0 },
        epochs: 10,
        eval_attacks: vec![],
        record_timing: false,
        seed: 7,
        ..TrainConfig::default()
    };
    let with = |variant| TrainConfig { schedule: LoatSchedule { e1: 2, e2: 8, variant, ..LoatSchedule::default() }, ..base.clone() };
    // the regularised runs differ from OFF during epochs 1-2, so all three
    // resume from one snapshot taken at the end of epoch E1
    let mut warm = Trainer::new(with(Variant::Slore), &data).unwrap();
    for _ in 0..2 {
        warm.run_epoch().unwrap();
    }
    let run = |variant| -> Vec<Vec<u64>> {
        let mut t = Trainer::resume(with(variant), &data, warm.weights().clone(), warm.velocity().clone(), 2).unwrap();
        (3..=8).map(|_| t.run_epoch().unwrap().batch_losses.iter().map(|l| l.to_bits()).collect()).collect()
    };
    let off = run(Variant::Off);
    let slore = run(Variant::Slore);
    let lore = run(Variant::Lore);
    let idle_equal = off[..5] == slore[..5] && off[..5] == lore[..5];
    // epoch 8 opens the late phase and must change the losses
    let late_differs = off[5] != slore[5] && off[5] != lore[5];
    let batches: usize = off[..5].iter().map(Vec::len).sum();
    outcome(
        idle_equal && late_differs,
        format!(
            "{batches} batch losses over epochs 3-7 bit-identical across OFF/SLORE/LORE: {idle_equal}; epoch 8 differs: {late_differs}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Criteria 8-10 share the MNIST-4000 reference configuration.

fn reference_sweep_config() -> SweepConfig {
    let mut cfg: SweepConfig = parse_json(
        r#"{
        "data": {"kind": "idx", "dir": "."},
        "widths": [32, 64, 128, 256],
        "lambdas": [0.25, 0.5, 0.75, 1.0],
        "seeds": [0, 1],
        "epochs_list": [10, 200],
        "template": {"eval_attacks": [], "record_timing": false}
    }"#,
    )
    .unwrap();
    cfg.data = DataConfig::Idx { dir: mnist_dir().canonicalize().unwrap_or_else(|_| mnist_dir()), train_limit: None, test_limit: None };
    cfg
}

fn reference_sweep() -> Result<(Table, String), String> {
    let cfg = reference_sweep_config();
    let data = cfg.data.load(Path::new(".")).map_err(|e| e.to_string())?;
    let mut key = serde_json::to_vec(&cfg).unwrap();
    let fp = DatasetFingerprint::of(&data);
    key.extend_from_slice(fp.train_sha256.as_bytes());
    key.extend_from_slice(fp.test_sha256.as_bytes());
    key.extend_from_slice(env!("CARGO_PKG_VERSION").as_bytes());
    let hash = blob_hash(&key);
    let cache = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-sweep-{}.csv", &hash[..16]));
    let fresh = std::env::var_os("LOAT_ACCEPTANCE_FRESH").is_some();
    if cache.exists() && !fresh {
        let rows = read_rows(&cache).map_err(|e| e.to_string())?;
        return Ok((Table::from_rows(&rows).map_err(|e| e.to_string())?, format!("cached sweep {}", cache.display())));
    }
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let start = Instant::now();
    let out = run_sweep(&cfg, &data, jobs).map_err(|e| e.to_string())?;
    if !out.failures.is_empty() {
        return Err(format!("{} sweep cells failed: {:?}", out.failures.len(), out.failures));
    }
    std::fs::create_dir_all(cache.parent().unwrap()).ok();
    write_rows(&cache, &out.rows).map_err(|e| e.to_string())?;
    let table = Table::from_rows(&out.rows).map_err(|e| e.to_string())?;
    Ok((table, format!("fresh sweep, {jobs} job(s), {:.0} s", start.elapsed().as_secs_f64())))
}

fn describe(r: &CorrelationReport) -> String {
    format!("budget {}: pearson {:+.3}, spearman {:+.3}, n = {}", r.epoch_budget, r.pearson_r, r.spearman_rho, r.n_points)
}

fn criterion_8(sweep: &Result<(Table, String), String>) -> Outcome {
    let (table, origin) = match sweep {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let early = correlate(table, Regime::Early);
    let late = correlate(table, Regime::Late);
    let show = |r: &loat_core::Result<CorrelationReport>| match r {
        Ok(r) => describe(r),
        Err(e) => format!("undefined ({e})"),
    };
    let pass = matches!(&early, Ok(e) if e.pearson_r >= 0.2) && matches!(&late, Ok(l) if l.pearson_r <= -0.2);
    outcome(pass, format!("early {}; late {}; need early >= +0.2 and late <= -0.2 ({origin})", show(&early), show(&late)))
}

fn criterion_9(sweep: &Result<(Table, String), String>) -> Outcome {
    let (table, origin) = match sweep {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let slopes = match fig2_slopes(table) {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let by_width = |w: usize| slopes.by_width.iter().find(|f| f.key == w).map(|f| f.slope);
    let by_lambda = |l: f64| slopes.by_lambda.iter().find(|f| f.key == l).map(|f| f.slope);
    let (Some(w_min), Some(w_max), Some(l_low), Some(l_one)) = (by_width(32), by_width(256), by_lambda(0.25), by_lambda(1.0)) else {
        return outcome(false, "sweep lacks the widths or lambdas needed");
    };
    let widths: Vec<String> = slopes.by_width.iter().map(|f| format!("{}:{:.3}", f.key, f.slope)).collect();
    let lambdas: Vec<String> = slopes.by_lambda.iter().map(|f| format!("{}:{:.3}", f.key, f.slope)).collect();
    outcome(
        w_max < w_min && l_one > l_low,
        format!(
            "slope(w=256) {w_max:.3} < slope(w=32) {w_min:.3}: {}; slope(l=1) {l_one:.3} > slope(l=0.25) {l_low:.3}: {}; by width [{}], by lambda [{}] ({origin})",
            w_max < w_min,
            l_one > l_low,
            widths.join(" "),
            lambdas.join(" ")
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn criterion_10() -> Outcome {
    let data = mnist(None, None);
    let cfg = reference_sweep_config();
    let mut cells = Vec::new();
    for &width in &cfg.widths {
        for &lambda in &cfg.lambdas {
            let base = TrainConfig {
                hidden_widths: vec![width],
                objective: ObjectiveSpec::Mixture { lambda },
                epochs: 100,
                eval_attacks: vec![],
                seed: 3,
                ..TrainConfig::default()
            };
            let lore = TrainConfig {
                schedule: LoatSchedule { e1: 100, e2: 100, variant: Variant::Lore, ..LoatSchedule::default() },
                ..base.clone()
            };
            cells.push((width, lambda, Trainer::new(base, &data).unwrap(), Trainer::new(lore, &data).unwrap(), Vec::new(), Vec::new()));
        }
    }
    // interleaved so drift in machine load hits both alike; round 0 warms caches
    for round in 0..6 {
        for (_, _, t_off, t_lore, off, on) in cells.iter_mut() {
            let a = t_off.run_epoch().unwrap().wall_ms;
            let b = t_lore.run_epoch().unwrap().wall_ms;
            if round > 0 {
                off.push(a);
                on.push(b);
            }
        }
    }
    let (mut total_off, mut total_on, mut worst) = (0.0, 0.0, (0.0, 0, 0.0));
    for (width, lambda, _, _, off, on) in cells {
        let (m_off, m_on) = (median(off), median(on));
        total_off += m_off;
        total_on += m_on;
        if m_on / m_off > worst.0 {
            worst = (m_on / m_off, width, lambda);
        }
    }
    let ratio = total_on / total_off;
    outcome(
        ratio <= 1.05,
        format!(
            "MNIST-4000 reference grid (16 width x lambda cells, PGD-AT): summed median epoch {total_on:.0} ms with LORE vs {total_off:.0} ms OFF; ratio {ratio:.3} (limit 1.05); worst cell w={} l={} at {:.3}",
            worst.1, worst.2, worst.0
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |c: usize| wanted.is_empty() || wanted.contains(&c);
    let names = [
        "gradient correctness",
        "FR radius <= logit-gap radius",
        "penalty lower bounds",
        "complexity bound oracle",
        "Rademacher estimator",
        "PGD optimality on linear models",
        "schedule idle gate",
        "correlation signs (MNIST-4000)",
        "radius slope trends (MNIST-4000)",
        "LORE overhead",
    ];
    let sweep = if selected(8) || selected(9) {
        let start = Instant::now();
        let s = catch_unwind(reference_sweep).unwrap_or_else(|_| Err("sweep panicked".into()));
        eprintln!("reference sweep ready after {:.0} s", start.elapsed().as_secs_f64());
        Some(s)
    } else {
        None
    };
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let c = i + 1;
        if !selected(c) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match c {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(sweep.as_ref().unwrap()),
            9 => criterion_9(sweep.as_ref().unwrap()),
            _ => criterion_10(),
        }))
        .unwrap_or_else(|_| outcome(false, "panicked"));
        failed += !result.pass as usize;
        println!(
            "criterion {c:2} {}: {name}: {} [{:.1} s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
