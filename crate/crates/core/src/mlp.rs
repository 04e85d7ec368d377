//! Bias-free ReLU multilayer perceptrons, `f(x) = W_L φ(⋯ φ(W_1 x))`.
//!
//! Layer `l` is an `H_l × H_{l-1}` matrix. With samples stored as rows the
//! forward pass computes `Z_l = A_{l-1} · W_lᵀ` and `A_l = relu(Z_l)`, the
//! final pre-activation being the logits. A "1-hidden-layer" network has
//! widths `[d, H, K]` and two weight matrices.
//!
//! The ReLU derivative at exactly zero is taken to be zero.
//!
//! # Checkpoint format
//!
//! Little-endian: one version byte (`1`), `L` as u32, the `L + 1` widths as
//! u32, then each layer's row-major `f64` entries in order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::math::{relu, Matrix, RngStream};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule", content = "scale")]
#[derive(Default)]
pub enum InitScale {
    /// Standard deviation `√(2 / H_{l-1})`.
    #[default]
    He,
    /// Fixed standard deviation.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// `[H_0 = d, H_1, …, H_L = K]`.
    pub layer_widths: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub init: InitScale,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Parameter("an MLP needs at least input and output widths".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Parameter("layer widths must be at least 1".into()));
        }
        if let InitScale::Fixed(s) = self.init {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Parameter(format!("fixed init scale must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    layers: Vec<Matrix>,
}

impl WeightSet {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("weight set needs at least one layer".into()));
        }
        for l in 1..layers.len() {
            if layers[l].cols() != layers[l - 1].rows() {
                return Err(Error::shape(
                    "WeightSet::new",
                    format!("layer {} is {:?} but layer {} outputs {}", l + 1, layers[l].shape(), l, layers[l - 1].rows()),
                ));
            }
        }
        Ok(WeightSet { layers })
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Matrix::rows)).collect()
    }

    /// Zero matrices with this weight set's shapes.
    pub fn zeros_like(&self) -> WeightSet {
        WeightSet { layers: self.layers.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect() }
    }

    pub fn scaled(&self, c: f64) -> WeightSet {
        WeightSet { layers: self.layers.iter().map(|m| m.scale(c)).collect() }
    }

    pub fn check_same_shape(&self, other: &WeightSet, op: &'static str) -> Result<()> {
        if self.layers.len() != other.layers.len() || self.layers.iter().zip(&other.layers).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.widths(), other.widths())));
        }
        Ok(())
    }

    /// `self += c * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &WeightSet, c: f64) -> Result<()> {
        self.check_same_shape(other, "WeightSet::add_scaled")?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(b, c)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let widths = self.widths();
        let mut out = vec![CHECKPOINT_VERSION];
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for w in widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for m in &self.layers {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = ByteCursor { bytes, pos: 0 };
        let version = cursor.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(format_error(0, format!("unsupported checkpoint version {version}")));
        }
        let depth = cursor.u32()? as usize;
        if depth == 0 {
            return Err(format_error(1, "checkpoint with zero layers".into()));
        }
        let mut widths = Vec::with_capacity(depth + 1);
        for _ in 0..=depth {
            widths.push(cursor.u32()? as usize);
        }
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let (rows, cols) = (widths[l + 1], widths[l]);
            let raw = cursor.take(rows * cols * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            layers.push(Matrix::from_vec(rows, cols, data)?);
        }
        if cursor.pos != bytes.len() {
            return Err(format_error(cursor.pos, "trailing bytes after checkpoint".into()));
        }
        WeightSet::new(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        WeightSet::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn format_error(offset: usize, detail: String) -> Error {
    Error::Format { offset: offset as u64, detail }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_error(self.pos, format!("checkpoint truncated: need {n} more bytes")));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Gaussian initialisation, deterministic per seed.
pub fn init(cfg: &MlpConfig) -> Result<WeightSet> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed);
    let layers = cfg
        .layer_widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let sd = match cfg.init {
                InitScale::He => (2.0 / fan_in as f64).sqrt(),
                InitScale::Fixed(s) => s,
            };
            let data = (0..fan_in * fan_out).map(|_| sd * rng.normal()).collect();
            Matrix::from_vec(fan_out, fan_in, data)
        })
        .collect::<Result<Vec<_>>>()?;
    WeightSet::new(layers)
}

/// Intermediates of one forward pass. `pre[l]` and `post[l]` belong to
/// layer `l + 1`; the last `post` entry is unused (logits are not rectified).
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub inputs: Matrix,
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.pre.last().expect("trace has at least one layer")
    }

    pub fn into_logits(mut self) -> Matrix {
        self.pre.pop().expect("trace has at least one layer")
    }
}

pub fn forward(w: &WeightSet, inputs: &Matrix) -> Result<ForwardTrace> {
    if inputs.cols() != w.input_dim() {
        return Err(Error::shape("forward", format!("inputs have {} columns, model expects {}", inputs.cols(), w.input_dim())));
    }
    let depth = w.depth();
    let mut pre = Vec::with_capacity(depth);
    let mut post: Vec<Matrix> = Vec::with_capacity(depth - 1);
    for (l, layer) in w.layers().iter().enumerate() {
        let a = if l == 0 { inputs } else { &post[l - 1] };
        let z = a.matmul_nt(layer)?;
        if l + 1 < depth {
            post.push(relu(&z));
        }
        pre.push(z);
    }
    Ok(ForwardTrace { inputs: inputs.clone(), pre, post })
}

/// Logits only.
pub fn logits(w: &WeightSet, inputs: &Matrix) -> Result<Matrix> {
    if inputs.cols() != w.input_dim() {
        return Err(Error::shape("logits", format!("inputs have {} columns, model expects {}", inputs.cols(), w.input_dim())));
    }
    let mut a = inputs.matmul_nt(&w.layers()[0])?;
    for layer in &w.layers()[1..] {
        a = relu(&a).matmul_nt(layer)?;
    }
    Ok(a)
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: WeightSet,
    pub input: Matrix,
}

fn check_logit_grad(trace: &ForwardTrace, logit_grad: &Matrix, op: &'static str) -> Result<()> {
    if trace.logits().shape() != logit_grad.shape() {
        return Err(Error::shape(op, format!("logit gradient {:?} vs logits {:?}", logit_grad.shape(), trace.logits().shape())));
    }
    Ok(())
}

/// Multiplies `delta` by the ReLU derivative of `pre` (0 where `pre <= 0`).
fn relu_mask(delta: &mut Matrix, pre: &Matrix) {
    for (d, &z) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if z <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Reverse-mode gradients of a scalar whose gradient with respect to the
/// logits is `logit_grad`.
pub fn backward(w: &WeightSet, trace: &ForwardTrace, logit_grad: &Matrix) -> Result<Gradients> {
    let mut weights = w.zeros_like();
    let input = reverse_into(w, trace, logit_grad, true, "backward", &mut weights)?;
    finite_weights(weights, "backward").map(|weights| Gradients { weights, input: input.expect("input gradient requested") })
}

/// Weight gradients only; skips the product that would produce the input gradient.
pub fn weight_gradients(w: &WeightSet, trace: &ForwardTrace, logit_grad: &Matrix) -> Result<WeightSet> {
    weight_gradients_sum(w, &[(trace, logit_grad)])
}

/// Sum of the weight gradients of several (trace, logit gradient) pairs,
/// accumulated in place. An empty list gives zeros.
pub fn weight_gradients_sum(w: &WeightSet, parts: &[(&ForwardTrace, &Matrix)]) -> Result<WeightSet> {
    let mut acc = w.zeros_like();
    for (trace, g) in parts {
        reverse_into(w, trace, g, false, "weight_gradients", &mut acc)?;
    }
    finite_weights(acc, "weight_gradients")
}

fn finite_weights(ws: WeightSet, op: &'static str) -> Result<WeightSet> {
    if ws.layers().iter().all(Matrix::is_finite) {
        Ok(ws)
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Gradient with respect to the inputs only; skips the weight products.
pub fn input_gradient(w: &WeightSet, trace: &ForwardTrace, logit_grad: &Matrix) -> Result<Matrix> {
    check_logit_grad(trace, logit_grad, "input_gradient")?;
    let mut delta = logit_grad.clone();
    for l in (0..w.depth()).rev() {
        let mut next = delta.matmul(&w.layers()[l])?;
        if l > 0 {
            relu_mask(&mut next, &trace.pre[l - 1]);
        }
        delta = next;
    }
    Ok(delta)
}

/// Adds the weight gradients into `acc`; returns the input gradient if asked.
fn reverse_into(
    w: &WeightSet,
    trace: &ForwardTrace,
    logit_grad: &Matrix,
    want_input: bool,
    op: &'static str,
    acc: &mut WeightSet,
) -> Result<Option<Matrix>> {
    check_logit_grad(trace, logit_grad, op)?;
    let mut delta = logit_grad.clone();
    for l in (0..w.depth()).rev() {
        let a = if l == 0 { &trace.inputs } else { &trace.post[l - 1] };
        delta.matmul_tn_add(a, &mut acc.layers_mut()[l])?;
        if l == 0 && !want_input {
            break;
        }
        let mut next = delta.matmul(&w.layers()[l])?;
        if l > 0 {
            relu_mask(&mut next, &trace.pre[l - 1]);
        }
        delta = next;
    }
    Ok(want_input.then_some(delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_inputs(rng: &mut RngStream, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn cfg(widths: &[usize], seed: u64) -> MlpConfig {
        MlpConfig { layer_widths: widths.to_vec(), seed, init: InitScale::He }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let w = init(&cfg(&[784, 50, 10], 7)).unwrap();
        assert_eq!(w.layers()[0].shape(), (50, 784));
        assert_eq!(w.layers()[1].shape(), (10, 50));
        assert_eq!(w, init(&cfg(&[784, 50, 10], 7)).unwrap());
        assert_ne!(w, init(&cfg(&[784, 50, 10], 8)).unwrap());
    }

    #[test]
    fn he_scale_is_roughly_right() {
        let w = init(&cfg(&[200, 300], 1)).unwrap();
        let v = w.layers()[0].as_slice();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - 0.01).abs() < 0.001, "variance {var}");
    }

    #[test]
    fn invalid_configs() {
        assert!(init(&cfg(&[4], 0)).is_err());
        assert!(init(&cfg(&[4, 0, 2], 0)).is_err());
    }

    #[test]
    fn zero_init_gives_zero_logits() {
        let c = MlpConfig { layer_widths: vec![3, 5, 4], seed: 0, init: InitScale::Fixed(0.0) };
        let w = init(&c).unwrap();
        let x = random_inputs(&mut RngStream::new(1), 6, 3);
        assert_eq!(forward(&w, &x).unwrap().logits().max_abs(), 0.0);
    }

    #[test]
    fn linear_network_is_plain_product() {
        let w = init(&cfg(&[5, 3], 3)).unwrap();
        let x = random_inputs(&mut RngStream::new(4), 4, 5);
        let trace = forward(&w, &x).unwrap();
        assert_eq!(trace.logits(), &x.matmul(&w.layers()[0].transpose()).unwrap());
        assert!(trace.post.is_empty());
    }

    #[test]
    fn nonnegative_weights_make_relu_inactive() {
        let w = init(&cfg(&[4, 6, 3], 5)).unwrap();
        let w = WeightSet::new(w.layers().iter().map(|m| m.map(f64::abs)).collect()).unwrap();
        let x = random_inputs(&mut RngStream::new(6), 3, 4);
        let chain = x.matmul(&w.layers()[0].transpose()).unwrap().matmul(&w.layers()[1].transpose()).unwrap();
        assert!(forward(&w, &x).unwrap().logits().sub(&chain).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn scaling_last_layer_scales_logits() {
        let mut w = init(&cfg(&[4, 6, 3], 9)).unwrap();
        let x = random_inputs(&mut RngStream::new(10), 3, 4);
        let before = logits(&w, &x).unwrap();
        w.layers_mut()[1].scale_in_place(2.5);
        let after = logits(&w, &x).unwrap();
        assert!(after.sub(&before.scale(2.5)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn forward_shape_error() {
        let w = init(&cfg(&[4, 3], 0)).unwrap();
        assert!(matches!(forward(&w, &Matrix::zeros(2, 5)), Err(Error::Shape { .. })));
        let trace = forward(&w, &Matrix::zeros(2, 4)).unwrap();
        assert!(matches!(backward(&w, &trace, &Matrix::zeros(2, 4)), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_logit_grad_gives_zero_gradients() {
        let w = init(&cfg(&[4, 6, 5, 3], 2)).unwrap();
        let x = random_inputs(&mut RngStream::new(3), 5, 4);
        let trace = forward(&w, &x).unwrap();
        let g = backward(&w, &trace, &Matrix::zeros(5, 3)).unwrap();
        assert!(g.weights.layers().iter().all(|m| m.max_abs() == 0.0));
        assert_eq!(g.input.max_abs(), 0.0);
    }

    #[test]
    fn linear_weight_gradient_closed_form() {
        let w = init(&cfg(&[4, 3], 2)).unwrap();
        let mut rng = RngStream::new(8);
        let x = random_inputs(&mut rng, 5, 4);
        let lg = Matrix::from_vec(5, 3, (0..15).map(|_| rng.normal()).collect()).unwrap();
        let g = backward(&w, &forward(&w, &x).unwrap(), &lg).unwrap();
        let expected = lg.transpose().matmul(&x).unwrap();
        assert!(g.weights.layers()[0].sub(&expected).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn summed_weight_gradients_match_separate_ones() {
        let w = init(&cfg(&[4, 7, 3], 21)).unwrap();
        let mut rng = RngStream::new(22);
        let (x1, x2) = (random_inputs(&mut rng, 6, 4), random_inputs(&mut rng, 6, 4));
        let g1 = Matrix::from_vec(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let g2 = Matrix::from_vec(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let (t1, t2) = (forward(&w, &x1).unwrap(), forward(&w, &x2).unwrap());
        let sum = weight_gradients_sum(&w, &[(&t1, &g1), (&t2, &g2)]).unwrap();
        let mut expected = weight_gradients(&w, &t1, &g1).unwrap();
        expected.add_scaled(&weight_gradients(&w, &t2, &g2).unwrap(), 1.0).unwrap();
        for (a, b) in sum.layers().iter().zip(expected.layers()) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-12);
        }
        assert!(weight_gradients_sum(&w, &[]).unwrap().layers().iter().all(|m| m.max_abs() == 0.0));
    }

    #[test]
    fn input_gradient_matches_backward() {
        let w = init(&cfg(&[4, 7, 3], 12)).unwrap();
        let mut rng = RngStream::new(13);
        let x = random_inputs(&mut rng, 6, 4);
        let lg = Matrix::from_vec(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let trace = forward(&w, &x).unwrap();
        let full = backward(&w, &trace, &lg).unwrap();
        assert_eq!(input_gradient(&w, &trace, &lg).unwrap(), full.input);
        assert_eq!(weight_gradients(&w, &trace, &lg).unwrap(), full.weights);
    }

    /// Central differences of `Σ G ⊙ logits` against the analytic backward pass.
    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-5;
        for case in 0..20u64 {
            let mut rng = RngStream::new(100 + case);
            let depth = 1 + rng.index(4);
            let mut widths = vec![1 + rng.index(8)];
            for _ in 0..depth {
                widths.push(1 + rng.index(16));
            }
            let w = init(&cfg(&widths, case)).unwrap();
            let n = 1 + rng.index(8);
            let x = random_inputs(&mut rng, n, widths[0]);
            let k = *widths.last().unwrap();
            let g = Matrix::from_vec(n, k, (0..n * k).map(|_| rng.normal()).collect()).unwrap();
            let objective = |w: &WeightSet, x: &Matrix| -> f64 {
                let z = logits(w, x).unwrap();
                z.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum()
            };
            let grads = backward(&w, &forward(&w, &x).unwrap(), &g).unwrap();
            for l in 0..w.depth() {
                for idx in 0..w.layers()[l].as_slice().len() {
                    let mut plus = w.clone();
                    plus.layers_mut()[l].as_mut_slice()[idx] += h;
                    let mut minus = w.clone();
                    minus.layers_mut()[l].as_mut_slice()[idx] -= h;
                    let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
                    let an = grads.weights.layers()[l].as_slice()[idx];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "case {case} layer {l} idx {idx}: fd {fd} analytic {an}");
                }
            }
            for idx in 0..x.as_slice().len() {
                let mut plus = x.clone();
                plus.as_mut_slice()[idx] += h;
                let mut minus = x.clone();
                minus.as_mut_slice()[idx] -= h;
                let fd = (objective(&w, &plus) - objective(&w, &minus)) / (2.0 * h);
                let an = grads.input.as_slice()[idx];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "case {case} input {idx}");
            }
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let w = init(&cfg(&[3, 4, 2], 1)).unwrap();
        let bytes = w.to_bytes();
        assert_eq!(WeightSet::from_bytes(&bytes).unwrap(), w);
        assert!(WeightSet::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 9;
        assert!(WeightSet::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(WeightSet::from_bytes(&long).is_err());
    }

    proptest! {
        #[test]
        fn positive_homogeneity(seed in any::<u64>(), c in 0.1f64..4.0, depth in 1usize..4) {
            let mut widths = vec![5];
            widths.extend(std::iter::repeat_n(7, depth - 1));
            widths.push(3);
            let w = init(&cfg(&widths, seed)).unwrap();
            let x = random_inputs(&mut RngStream::new(seed ^ 77), 4, 5);
            let base = logits(&w, &x).unwrap().scale(c.powi(depth as i32));
            let scaled = logits(&w.scaled(c), &x).unwrap();
            let err = scaled.sub(&base).unwrap().max_abs() / base.max_abs().max(1e-300);
            prop_assert!(err < 1e-9);
        }

        #[test]
        fn checkpoint_round_trip(seed in any::<u64>(), h in 1usize..9) {
            let w = init(&cfg(&[3, h, 2], seed)).unwrap();
            prop_assert_eq!(WeightSet::from_bytes(&w.to_bytes()).unwrap(), w);
        }
    }
}
