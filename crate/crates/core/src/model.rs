//! Differentiable classifiers over flat parameter vectors.
//!
//! Parameters are always stored as a single `Vec<f64>` so that Euclidean
//! distances, averages and proximal terms are defined uniformly for every
//! model kind. The flattening order is fixed:
//!
//! * `SoftmaxLinear`: one block of `F + 1` values per class `c = 0..C`,
//!   holding the `F` weights of class `c` followed by its bias.
//!   `D = (F + 1) * C`.
//! * `OneHiddenLayer`: first the hidden layer, one block of `F + 1` values per
//!   hidden unit (weights then bias), then the output layer, one block of
//!   `H + 1` values per class (weights then bias). Hidden units use `tanh`.
//!   `D = H * (F + 1) + C * (H + 1)`.

use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat model coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(pub Vec<f64>);

impl ModelParams {
    pub fn zeros(dim: usize) -> Self {
        ModelParams(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch { expected, found: self.dim() });
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &[f64]) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += scale * b;
        }
    }
}

impl From<Vec<f64>> for ModelParams {
    fn from(v: Vec<f64>) -> Self {
        ModelParams(v)
    }
}

impl Deref for ModelParams {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModelParams {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetShard {
    pub owner: usize,
    pub examples: Vec<LabeledExample>,
}

impl DatasetShard {
    pub fn new(owner: usize, examples: Vec<LabeledExample>) -> Self {
        DatasetShard { owner, examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SoftmaxLinear,
    OneHiddenLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub features: usize,
    pub classes: usize,
    /// Hidden width; ignored by `SoftmaxLinear`.
    #[serde(default)]
    pub hidden: usize,
}

impl ModelSpec {
    pub fn softmax(features: usize, classes: usize) -> Self {
        ModelSpec { kind: ModelKind::SoftmaxLinear, features, classes, hidden: 0 }
    }

    pub fn hidden_layer(features: usize, classes: usize, hidden: usize) -> Self {
        ModelSpec { kind: ModelKind::OneHiddenLayer, features, classes, hidden }
    }

    pub fn dim(&self) -> usize {
        let (f, c, h) = (self.features, self.classes, self.hidden);
        match self.kind {
            ModelKind::SoftmaxLinear => (f + 1) * c,
            ModelKind::OneHiddenLayer => h * (f + 1) + c * (h + 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::config("model.features", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "must be at least 2"));
        }
        if self.kind == ModelKind::OneHiddenLayer && self.hidden == 0 {
            return Err(Error::config("model.hidden", "must be positive for one-hidden-layer"));
        }
        Ok(())
    }

    fn check(&self, w: &ModelParams, examples: &[LabeledExample]) -> Result<()> {
        w.check_dim(self.dim())?;
        for ex in examples {
            if ex.features.len() != self.features {
                return Err(Error::DimensionMismatch { expected: self.features, found: ex.features.len() });
            }
            if ex.label >= self.classes {
                return Err(Error::config("label", format!("label {} outside [0, {})", ex.label, self.classes)));
            }
        }
        Ok(())
    }
}

/// Deterministic initialization: zero-mean normal entries with standard
/// deviation `1/sqrt(F)` (the output layer of the hidden model uses `1/sqrt(H)`).
pub fn init_params(spec: &ModelSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = Normal::new(0.0, 1.0 / (spec.features as f64).sqrt()).unwrap();
    match spec.kind {
        ModelKind::SoftmaxLinear => ModelParams((0..spec.dim()).map(|_| first.sample(&mut rng)).collect()),
        ModelKind::OneHiddenLayer => {
            let second = Normal::new(0.0, 1.0 / (spec.hidden as f64).sqrt()).unwrap();
            let split = spec.hidden * (spec.features + 1);
            let mut v: Vec<f64> = (0..split).map(|_| first.sample(&mut rng)).collect();
            v.extend((split..spec.dim()).map(|_| second.sample(&mut rng)));
            ModelParams(v)
        }
    }
}

/// Class scores for one input, written into `out` (length `C`).
/// `hidden` receives the tanh activations for the hidden model.
fn forward(spec: &ModelSpec, w: &[f64], x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
    let f = spec.features;
    match spec.kind {
        ModelKind::SoftmaxLinear => {
            for (c, o) in out.iter_mut().enumerate() {
                let block = &w[c * (f + 1)..(c + 1) * (f + 1)];
                *o = dot(&block[..f], x) + block[f];
            }
        }
        ModelKind::OneHiddenLayer => {
            let h = spec.hidden;
            for (j, a) in hidden.iter_mut().enumerate() {
                let block = &w[j * (f + 1)..(j + 1) * (f + 1)];
                *a = (dot(&block[..f], x) + block[f]).tanh();
            }
            let base = h * (f + 1);
            for (c, o) in out.iter_mut().enumerate() {
                let block = &w[base + c * (h + 1)..base + (c + 1) * (h + 1)];
                *o = dot(&block[..h], hidden) + block[h];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place log-softmax; returns nothing, `z` holds log-probabilities after.
fn log_softmax(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in z.iter_mut() {
        *v -= lse;
    }
}

fn argmax_lowest(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and (optionally) its gradient over a batch of examples.
pub(crate) fn loss_and_grad<'a, I>(spec: &ModelSpec, w: &[f64], examples: I, mut grad: Option<&mut [f64]>) -> f64
where
    I: IntoIterator<Item = &'a LabeledExample>,
{
    let (f, c, h) = (spec.features, spec.classes, spec.hidden);
    let mut hidden = vec![0.0; h];
    let mut z = vec![0.0; c];
    let mut dh = vec![0.0; h];
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ex in examples {
        n += 1;
        forward(spec, w, &ex.features, &mut hidden, &mut z);
        log_softmax(&mut z);
        total -= z[ex.label];
        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        // z now holds log p; turn it into dL/dlogits = p - onehot
        for (k, v) in z.iter_mut().enumerate() {
            *v = v.exp() - if k == ex.label { 1.0 } else { 0.0 };
        }
        match spec.kind {
            ModelKind::SoftmaxLinear => {
                for (k, dz) in z.iter().enumerate() {
                    let block = &mut g[k * (f + 1)..(k + 1) * (f + 1)];
                    for (gi, xi) in block[..f].iter_mut().zip(&ex.features) {
                        *gi += dz * xi;
                    }
                    block[f] += dz;
                }
            }
            ModelKind::OneHiddenLayer => {
                let base = h * (f + 1);
                dh.fill(0.0);
                for (k, dz) in z.iter().enumerate() {
                    let off = base + k * (h + 1);
                    for j in 0..h {
                        g[off + j] += dz * hidden[j];
                        dh[j] += dz * w[off + j];
                    }
                    g[off + h] += dz;
                }
                for j in 0..h {
                    let da = dh[j] * (1.0 - hidden[j] * hidden[j]);
                    let block = &mut g[j * (f + 1)..(j + 1) * (f + 1)];
                    for (gi, xi) in block[..f].iter_mut().zip(&ex.features) {
                        *gi += da * xi;
                    }
                    block[f] += da;
                }
            }
        }
    }
    if n == 0 {
        return 0.0;
    }
    let inv = 1.0 / n as f64;
    if let Some(g) = grad {
        g.iter_mut().for_each(|v| *v *= inv);
    }
    total * inv
}

/// Mean cross-entropy of `w` over the shard.
pub fn loss(spec: &ModelSpec, w: &ModelParams, shard: &DatasetShard) -> Result<f64> {
    spec.check(w, &shard.examples)?;
    Ok(loss_and_grad(spec, w, &shard.examples, None))
}

/// Exact gradient of [`loss`].
pub fn loss_gradient(spec: &ModelSpec, w: &ModelParams, shard: &DatasetShard) -> Result<Vec<f64>> {
    spec.check(w, &shard.examples)?;
    let mut g = vec![0.0; w.dim()];
    loss_and_grad(spec, w, &shard.examples, Some(&mut g));
    Ok(g)
}

/// Predicted class for one input; ties go to the lowest class id.
pub fn predict(spec: &ModelSpec, w: &ModelParams, features: &[f64]) -> usize {
    let mut hidden = vec![0.0; spec.hidden];
    let mut z = vec![0.0; spec.classes];
    forward(spec, w, features, &mut hidden, &mut z);
    argmax_lowest(&z)
}

pub(crate) fn count_correct<'a, I>(spec: &ModelSpec, w: &[f64], examples: I) -> (usize, usize)
where
    I: IntoIterator<Item = &'a LabeledExample>,
{
    let mut hidden = vec![0.0; spec.hidden];
    let mut z = vec![0.0; spec.classes];
    let (mut hit, mut n) = (0, 0);
    for ex in examples {
        forward(spec, w, &ex.features, &mut hidden, &mut z);
        if argmax_lowest(&z) == ex.label {
            hit += 1;
        }
        n += 1;
    }
    (hit, n)
}

/// Fraction of examples whose predicted class equals the label.
/// An empty shard scores 0.
pub fn accuracy(spec: &ModelSpec, w: &ModelParams, shard: &DatasetShard) -> Result<f64> {
    spec.check(w, &shard.examples)?;
    let (hit, n) = count_correct(spec, w, &shard.examples);
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(features: Vec<f64>, label: usize) -> LabeledExample {
        LabeledExample { features, label }
    }

    fn fixture4() -> DatasetShard {
        DatasetShard::new(0, vec![ex(vec![1.0, 0.5], 0), ex(vec![-0.3, 2.0], 1), ex(vec![0.7, -1.2], 2), ex(vec![-1.5, -0.4], 1)])
    }

    /// Scalar re-derivation of softmax cross-entropy, written independently
    /// of the block layout helpers above.
    fn naive_loss(w: &[f64], shard: &DatasetShard, f: usize, c: usize) -> f64 {
        let mut total = 0.0;
        for e in &shard.examples {
            let mut logits = Vec::new();
            for k in 0..c {
                let mut s = w[k * (f + 1) + f];
                for i in 0..f {
                    s += w[k * (f + 1) + i] * e.features[i];
                }
                logits.push(s);
            }
            let denom: f64 = logits.iter().map(|v| v.exp()).sum();
            total += -(logits[e.label].exp() / denom).ln();
        }
        total / shard.len() as f64
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let spec = ModelSpec::softmax(2, 2);
        assert_eq!(init_params(&spec, 7), init_params(&spec, 7));
        assert_ne!(init_params(&spec, 7), init_params(&spec, 8));
        assert_eq!(init_params(&ModelSpec::softmax(2, 3), 1).dim(), 9);
        assert_eq!(ModelSpec::hidden_layer(3, 2, 4).dim(), 4 * 4 + 2 * 5);
    }

    #[test]
    fn init_mean_near_zero_over_seeds() {
        let spec = ModelSpec::softmax(2, 3);
        let (mut sum, mut n) = (0.0, 0usize);
        for seed in 0..1000 {
            let w = init_params(&spec, seed);
            sum += w.iter().sum::<f64>();
            n += w.dim();
        }
        assert!((sum / n as f64).abs() < 0.05);
    }

    #[test]
    fn zero_weights_give_ln2() {
        let spec = ModelSpec::softmax(2, 2);
        let shard = DatasetShard::new(0, vec![ex(vec![3.0, -1.0], 0), ex(vec![0.2, 0.1], 1)]);
        let l = loss(&spec, &ModelParams::zeros(6), &shard).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_prediction_gives_zero_loss() {
        let spec = ModelSpec::softmax(1, 2);
        // class 0 bias huge, class 1 bias tiny
        let w = ModelParams(vec![0.0, 800.0, 0.0, -800.0]);
        let shard = DatasetShard::new(0, vec![ex(vec![1.0], 0)]);
        assert_eq!(loss(&spec, &w, &shard).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_scalar_rederivation() {
        let spec = ModelSpec::softmax(2, 3);
        let w = ModelParams(vec![0.3, -0.2, 0.1, -0.5, 0.8, 0.0, 0.25, 0.4, -0.3]);
        let shard = fixture4();
        let a = loss(&spec, &w, &shard).unwrap();
        let b = naive_loss(&w, &shard, 2, 3);
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }

    #[test]
    fn symmetric_two_class_gradient_is_antisymmetric() {
        let spec = ModelSpec::softmax(2, 2);
        let shard = DatasetShard::new(0, vec![ex(vec![1.0, 2.0], 0), ex(vec![-0.5, 0.3], 1)]);
        let g = loss_gradient(&spec, &ModelParams::zeros(6), &shard).unwrap();
        for i in 0..3 {
            assert!((g[i] + g[3 + i]).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_vanishes_at_minimizer() {
        // Balanced labels on a single shared input: the unique minimizer of the
        // bias-only problem is equal logits, reached at w = 0.
        let spec = ModelSpec::softmax(1, 2);
        let shard = DatasetShard::new(0, vec![ex(vec![0.0], 0), ex(vec![0.0], 1)]);
        let g = loss_gradient(&spec, &ModelParams::zeros(4), &shard).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);
    }

    fn fd_check(spec: &ModelSpec, seed: u64) {
        let w = init_params(spec, seed);
        let shard = fixture4();
        let g = loss_gradient(spec, &w, &shard).unwrap();
        let h = 1e-5;
        let mut num = vec![0.0; w.dim()];
        for i in 0..w.dim() {
            let mut p = w.clone();
            p[i] += h;
            let mut m = w.clone();
            m[i] -= h;
            num[i] = (loss(spec, &p, &shard).unwrap() - loss(spec, &m, &shard).unwrap()) / (2.0 * h);
        }
        let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-5, "rel err {}", diff / scale);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            fd_check(&ModelSpec::softmax(2, 3), seed);
            fd_check(&ModelSpec::hidden_layer(2, 3, 4), seed);
        }
    }

    #[test]
    fn zero_weights_predict_class_zero() {
        let spec = ModelSpec::softmax(2, 3);
        let shard = fixture4();
        let acc = accuracy(&spec, &ModelParams::zeros(9), &shard).unwrap();
        assert_eq!(acc, 0.25);
    }

    #[test]
    fn accuracy_matches_per_example_check() {
        let spec = ModelSpec::softmax(2, 3);
        let w = init_params(&spec, 3);
        let shard = fixture4();
        let mut hits = 0;
        for e in &shard.examples {
            let scores: Vec<f64> = (0..3).map(|k| w[k * 3] * e.features[0] + w[k * 3 + 1] * e.features[1] + w[k * 3 + 2]).collect();
            let mut best = 0;
            for k in 1..3 {
                if scores[k] > scores[best] {
                    best = k;
                }
            }
            hits += usize::from(best == e.label);
        }
        assert_eq!(accuracy(&spec, &w, &shard).unwrap(), hits as f64 / 4.0);
    }

    #[test]
    fn dimension_errors() {
        let spec = ModelSpec::softmax(2, 3);
        assert!(matches!(loss(&spec, &ModelParams::zeros(8), &fixture4()), Err(Error::DimensionMismatch { expected: 9, found: 8 })));
        let bad = DatasetShard::new(0, vec![ex(vec![1.0], 0)]);
        assert!(loss(&spec, &ModelParams::zeros(9), &bad).is_err());
    }
}
