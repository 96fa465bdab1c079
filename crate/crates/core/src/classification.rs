//! Party A's classifier over `[r^A | r^B]` and its update objective: a
//! temperature-softened distillation term against the previous snapshot
//! mixed with class-weighted cross-entropy on the newly aligned rows.
//!
//! Both terms are means over the batch, so `lambda` mixes them on a common
//! scale and the learning rate does not depend on the batch size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{chain, Activation, Mlp, ScalarLoss};
use crate::training::{check_finite, minibatches, Optimizer, TrainOptions};

pub const DEFAULT_CLASSIFIER_HIDDEN: usize = 100;
pub const DEFAULT_TEMPERATURE: f64 = 2.0;
pub const DEFAULT_LAMBDA: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub class_weights: Vec<f64>,
}

impl DistillConfig {
    pub fn new(temperature: f64, lambda: f64, class_weights: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            temperature,
            lambda,
            class_weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default temperature and mixing weight with unit class weights.
    pub fn balanced(class_count: usize) -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            lambda: DEFAULT_LAMBDA,
            class_weights: vec![1.0; class_count],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.class_weights.is_empty() || self.class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("class weights must be positive".into()));
        }
        Ok(())
    }
}

/// `w_c = N / (C * N_c)`; classes absent from `labels` get weight 1.
pub fn inverse_frequency_weights(labels: &[usize], class_count: usize) -> Vec<f64> {
    let counts = crate::data::class_counts(labels, class_count);
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { n / (class_count as f64 * c as f64) })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSnapshot {
    pub net: Mlp,
    pub timestamp: usize,
}

impl ClassifierSnapshot {
    pub fn logits(&self, reps: &Matrix) -> Result<Matrix> {
        self.net.predict(reps)
    }

    pub fn predict_proba(&self, reps: &Matrix) -> Result<Matrix> {
        Ok(softened_softmax(&self.logits(reps)?, 1.0))
    }

    pub fn predict(&self, reps: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(reps)?.argmax_rows())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// `in_dim -> hidden (tanh) -> classes (identity logits)`.
pub fn new_classifier(in_dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<Mlp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp::new(&chain(&[in_dim, hidden, classes], Activation::Tanh, Activation::Identity), &mut rng)
}

/// Columns `[r_a | r_b]`.
pub fn concat_reps(r_a: &Matrix, r_b: &Matrix) -> Result<Matrix> {
    r_a.hconcat(r_b)
}

/// Row-wise `softmax(logits / temperature)`, max-subtracted.
pub fn softened_softmax(logits: &Matrix, temperature: f64) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn log_softmax_row(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = row.iter().map(|v| (v - max) / temperature).collect();
    let lse = scaled.iter().map(|v| v.exp()).sum::<f64>().ln();
    scaled.iter().map(|v| v - lse).collect()
}

/// Mean over rows of `-sum_c softmax(t/F)_c * log softmax(s/F)_c`.
pub fn distill_loss(teacher_logits: &Matrix, student_logits: &Matrix, temperature: f64) -> Result<f64> {
    teacher_logits.ensure_same_shape("distill_loss", student_logits)?;
    let p = softened_softmax(teacher_logits, temperature);
    let n = student_logits.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        let log_q = log_softmax_row(student_logits.row(i), temperature);
        total -= p.row(i).iter().zip(&log_q).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Mean over rows of `-w_y * log softmax(s)_y`.
pub fn ce_loss(labels: &[usize], student_logits: &Matrix, weights: &[f64]) -> Result<f64> {
    check_labels(labels, student_logits, weights)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -weights[y] * log_softmax_row(student_logits.row(i), 1.0)[y])
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_labels(labels: &[usize], logits: &Matrix, weights: &[f64]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("labels", logits.rows(), labels.len()));
    }
    if weights.len() != logits.cols() {
        return Err(Error::shape("class weights", logits.cols(), weights.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    Ok(())
}

/// One-hot encoding of class indices.
pub fn one_hot(labels: &[usize], class_count: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), class_count);
    for (i, &y) in labels.iter().enumerate() {
        m.set(i, y, 1.0);
    }
    m
}

pub fn combined_loss(distill: f64, ce: f64, lambda: f64) -> f64 {
    lambda * distill + (1.0 - lambda) * ce
}

/// The update objective on a batch, as a loss over the student's logits.
/// Without teacher logits only the cross-entropy term is used.
pub struct ClassifierObjective<'a> {
    pub teacher_logits: Option<&'a Matrix>,
    pub labels: &'a [usize],
    pub temperature: f64,
    pub lambda: f64,
    pub class_weights: &'a [f64],
}

impl ClassifierObjective<'_> {
    fn effective_lambda(&self) -> f64 {
        if self.teacher_logits.is_some() {
            self.lambda
        } else {
            0.0
        }
    }
}

impl ScalarLoss for ClassifierObjective<'_> {
    fn value(&self, logits: &Matrix) -> f64 {
        let ce = ce_loss(self.labels, logits, self.class_weights).expect("objective shapes checked");
        match self.teacher_logits {
            Some(t) => combined_loss(
                distill_loss(t, logits, self.temperature).expect("objective shapes checked"),
                ce,
                self.lambda,
            ),
            None => ce,
        }
    }

    fn gradient(&self, logits: &Matrix) -> Matrix {
        let n = logits.rows().max(1) as f64;
        let lambda = self.effective_lambda();
        let probs = softened_softmax(logits, 1.0);
        let mut grad = Matrix::zeros(logits.rows(), logits.cols());
        for (i, &y) in self.labels.iter().enumerate() {
            let w = self.class_weights[y];
            for (c, g) in grad.row_mut(i).iter_mut().enumerate() {
                let target = if c == y { 1.0 } else { 0.0 };
                *g = (1.0 - lambda) * w * (probs.get(i, c) - target) / n;
            }
        }
        if let (Some(t), true) = (self.teacher_logits, lambda > 0.0) {
            let p = softened_softmax(t, self.temperature);
            let q = softened_softmax(logits, self.temperature);
            let k = lambda / (self.temperature * n);
            for (g, (qv, pv)) in grad.as_mut_slice().iter_mut().zip(q.as_slice().iter().zip(p.as_slice())) {
                *g += k * (qv - pv);
            }
        }
        grad
    }
}

/// Trains `init` on `(reps, labels)`. With a teacher the objective mixes
/// distillation (weight `lambda`) and cross-entropy; without one it is
/// cross-entropy alone. Returns the trained network and the full-data
/// objective before training and after each epoch.
pub fn fit_classifier(
    init: Mlp,
    teacher: Option<&Mlp>,
    reps: &Matrix,
    labels: &[usize],
    cfg: &DistillConfig,
    opts: &TrainOptions,
    optimizer: Optimizer,
) -> Result<(Mlp, Vec<f64>)> {
    opts.validate()?;
    cfg.validate()?;
    if reps.cols() != init.in_dim() {
        return Err(Error::shape("classifier input", init.in_dim(), reps.cols()));
    }
    check_labels(labels, &Matrix::zeros(reps.rows(), init.out_dim()), &cfg.class_weights)?;
    if reps.rows() == 0 {
        return Err(Error::InvalidArgument("classifier training data is empty".into()));
    }
    let mut net = init;
    let teacher_all = teacher.map(|t| t.predict(reps)).transpose()?;
    let objective = |net: &Mlp| -> Result<f64> {
        let logits = net.predict(reps)?;
        Ok(ClassifierObjective {
            teacher_logits: teacher_all.as_ref(),
            labels,
            temperature: cfg.temperature,
            lambda: cfg.lambda,
            class_weights: &cfg.class_weights,
        }
        .value(&logits))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = optimizer.state_for(&net);
    let mut trace = vec![objective(&net)?];
    for epoch in 0..opts.epochs {
        let mut total = 0.0;
        for batch in minibatches(reps.rows(), opts.batch_size, &mut rng) {
            let x = reps.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let t = teacher_all.as_ref().map(|t| t.select_rows(&batch));
            let (logits, cache) = net.forward(&x)?;
            let obj = ClassifierObjective {
                teacher_logits: t.as_ref(),
                labels: &y,
                temperature: cfg.temperature,
                lambda: cfg.lambda,
                class_weights: &cfg.class_weights,
            };
            total += obj.value(&logits) * batch.len() as f64;
            let grads = net.param_gradients(&cache, &obj.gradient(&logits))?;
            state.step(&mut net, &grads, opts.lr)?;
        }
        // Mean of the losses seen during the epoch, before each step.
        let loss = total / reps.rows() as f64;
        check_finite("classifier", epoch, loss)?;
        trace.push(loss);
    }
    Ok((net, trace))
}

/// One timestamp's classifier update. At `t = 0` (`prev` is `None`) a fresh
/// network seeded by `opts.seed` is trained with cross-entropy alone; later
/// the student starts from `prev`, which also serves as the frozen teacher.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier_t(
    prev: Option<&ClassifierSnapshot>,
    reps: &Matrix,
    labels: &[usize],
    cfg: &DistillConfig,
    opts: &TrainOptions,
    optimizer: Optimizer,
    hidden: usize,
    timestamp: usize,
) -> Result<(ClassifierSnapshot, Vec<f64>)> {
    let (init, teacher) = match prev {
        Some(p) => (p.net.clone(), Some(&p.net)),
        None => (new_classifier(reps.cols(), hidden, cfg.class_weights.len(), opts.seed)?, None),
    };
    let (net, trace) = fit_classifier(init, teacher, reps, labels, cfg, opts, optimizer)?;
    Ok((ClassifierSnapshot { net, timestamp }, trace))
}
