//! Multinomial logistic regression trained by full-batch gradient descent.
//!
//! It supplies the class probabilities and embeddings the calibrators consume.
//! The embedding is the standardized input: for a linear model the layer
//! before the logits is the input itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::Record;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Scale of the seeded Gaussian initialization of the weights.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 300, learning_rate: 0.5, l2: 1e-3, init_scale: 0.01 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    n_classes: usize,
    dim: usize,
    /// Row-major `n_classes x dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    /// Objective value before every epoch, then after the last one.
    loss_trace: Vec<f64>,
}

/// Regularized mean cross-entropy over standardized inputs.
pub struct Objective<'a> {
    inputs: &'a [Vec<f64>],
    labels: &'a [usize],
    n_classes: usize,
    l2: f64,
}

pub struct Evaluation {
    pub loss: f64,
    pub grad_weights: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(inputs: &'a [Vec<f64>], labels: &'a [usize], n_classes: usize, l2: f64) -> Self {
        Self { inputs, labels, n_classes, l2 }
    }

    /// `mean_i -ln softmax(W x_i + b)[y_i] + (l2 / 2) ||W||^2` and its gradient.
    pub fn evaluate(&self, weights: &[f64], bias: &[f64]) -> Evaluation {
        let c = self.n_classes;
        let d = bias_dim(weights, c);
        let n = self.inputs.len() as f64;
        let mut loss = 0.0;
        let mut gw = vec![0.0; c * d];
        let mut gb = vec![0.0; c];
        for (x, &y) in self.inputs.iter().zip(self.labels) {
            let logits = logits(weights, bias, x);
            let (probs, log_norm) = softmax(&logits);
            loss += log_norm - logits[y];
            for k in 0..c {
                let r = probs[k] - f64::from(u8::from(k == y));
                gb[k] += r / n;
                for (g, xj) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *g += r * xj / n;
                }
            }
        }
        loss /= n;
        loss += 0.5 * self.l2 * weights.iter().map(|w| w * w).sum::<f64>();
        for (g, w) in gw.iter_mut().zip(weights) {
            *g += self.l2 * w;
        }
        Evaluation { loss, grad_weights: gw, grad_bias: gb }
    }
}

fn bias_dim(weights: &[f64], c: usize) -> usize {
    weights.len() / c
}

fn logits(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    bias.iter()
        .enumerate()
        .map(|(k, b)| b + weights[k * d..(k + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Probabilities plus the log normalizer `ln sum exp(z)`.
fn softmax(z: &[f64]) -> (Vec<f64>, f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / total).collect(), max + total.ln())
}

impl LinearClassifier {
    /// Fits on labeled records. `n_classes` must cover every label.
    pub fn train(records: &[Record], n_classes: usize, config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let dim = records[0].features.len();
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            if r.features.len() != dim {
                return Err(Error::Shape { expected: dim, got: r.features.len() });
            }
            let y = r.require_label()?;
            if y >= n_classes {
                return Err(Error::InvalidLabel { label: y, n_classes });
            }
            labels.push(y);
        }
        let first = labels[0];
        if labels.iter().all(|&y| y == first) {
            return Err(Error::DegenerateLabels);
        }

        let n = records.len() as f64;
        let feature_mean: Vec<f64> = (0..dim).map(|j| records.iter().map(|r| r.features[j]).sum::<f64>() / n).collect();
        let feature_std: Vec<f64> = (0..dim)
            .map(|j| {
                let var = records.iter().map(|r| (r.features[j] - feature_mean[j]).powi(2)).sum::<f64>() / n;
                var.sqrt().max(STD_FLOOR)
            })
            .collect();

        let mut model = Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
            feature_mean,
            feature_std,
            loss_trace: Vec::with_capacity(config.epochs + 1),
        };
        if config.init_scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, config.init_scale).expect("validated scale");
            model.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }

        let inputs: Vec<Vec<f64>> = records.iter().map(|r| model.standardize(&r.features)).collect();
        let objective = Objective::new(&inputs, &labels, n_classes, config.l2);
        let lr = config.learning_rate;
        for _ in 0..config.epochs {
            let eval = objective.evaluate(&model.weights, &model.bias);
            model.loss_trace.push(eval.loss);
            // proximal step on the l2 term keeps large penalties stable
            let shrink = 1.0 / (1.0 + lr * config.l2);
            for (w, g) in model.weights.iter_mut().zip(&eval.grad_weights) {
                let data_grad = g - config.l2 * *w;
                *w = (*w - lr * data_grad) * shrink;
            }
            for (b, g) in model.bias.iter_mut().zip(&eval.grad_bias) {
                *b -= lr * g;
            }
        }
        model.loss_trace.push(objective.evaluate(&model.weights, &model.bias).loss);
        Ok(model)
    }

    /// Builds a classifier from explicit parameters and standardization.
    pub fn from_parts(weights: Vec<f64>, bias: Vec<f64>, feature_mean: Vec<f64>, feature_std: Vec<f64>) -> Result<Self> {
        let n_classes = bias.len();
        let dim = feature_mean.len();
        if n_classes < 2 || weights.len() != n_classes * dim || feature_std.len() != dim {
            return Err(Error::Shape { expected: n_classes * dim, got: weights.len() });
        }
        if weights.iter().chain(&bias).chain(&feature_mean).any(|v| !v.is_finite())
            || feature_std.iter().any(|s| !(s.is_finite() && *s >= STD_FLOOR))
        {
            return Err(Error::Config("classifier parameters must be finite with std >= 1e-8".into()));
        }
        Ok(Self { n_classes, dim, weights, bias, feature_mean, feature_std, loss_trace: Vec::new() })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }

    fn standardize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    fn check(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::Shape { expected: self.dim, got: features.len() });
        }
        Ok(())
    }

    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check(features)?;
        Ok(self.standardize(features))
    }

    pub fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        let z = self.embed(features)?;
        Ok(softmax(&logits(&self.weights, &self.bias, &z)).0)
    }

    /// Copy of `record` with model probabilities and embedding attached.
    pub fn featurize(&self, record: &Record) -> Result<Record> {
        let mut out = record.clone();
        out.embedding = Some(self.embed(&record.features)?);
        out.probs = Some(self.predict_proba(&record.features)?);
        Ok(out)
    }

    pub fn accuracy(&self, records: &[Record]) -> Result<f64> {
        let mut hits = 0usize;
        for r in records {
            let p = self.predict_proba(&r.features)?;
            let top = argmax(&p);
            hits += usize::from(top == r.require_label()?);
        }
        Ok(hits as f64 / records.len().max(1) as f64)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

pub fn train(records: &[Record], n_classes: usize, config: &TrainConfig, seed: u64) -> Result<LinearClassifier> {
    LinearClassifier::train(records, n_classes, config, seed)
}

pub fn predict_proba(model: &LinearClassifier, features: &[f64]) -> Result<Vec<f64>> {
    model.predict_proba(features)
}

pub fn embed(model: &LinearClassifier, features: &[f64]) -> Result<Vec<f64>> {
    model.embed(features)
}
