//! Loss functions, gradients and smoothness constants for the synthetic tasks.
//!
//! Two model families are supported:
//!
//! * `MseLinear`: per-sample loss `½(⟨w,x⟩ − y)²`, so the Hessian of the mean
//!   loss is exactly `(1/m)XᵀX`.
//! * `SoftmaxLinear`: multinomial logistic regression without bias. The
//!   parameter vector stores the `C × d` weight matrix row-major.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};

/// Dense model parameters.
///
/// Every vector handed out by a public operation has finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wraps `values`, rejecting NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "parameter entry {pos} is not finite ({})",
                values[pos]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Wraps values without the finiteness check. Callers guarantee finiteness
    /// or deliberately carry a diverged iterate internally.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Squared Euclidean distance to `other`. Lengths must match.
    pub fn distance_sq(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Regression value or class index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Value(f64),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub target: Target,
}

impl LabeledExample {
    pub fn regression(features: Vec<f64>, target: f64) -> Self {
        Self {
            features,
            target: Target::Value(target),
        }
    }

    pub fn classification(features: Vec<f64>, class: usize) -> Self {
        Self {
            features,
            target: Target::Class(class),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MseLinear,
    SoftmaxLinear,
}

/// A loss family bound to a feature dimension, plus its smoothness constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    pub dim: usize,
    /// Class count; 1 for regression.
    pub classes: usize,
    /// Upper bound on the gradient Lipschitz constant over the attached data.
    pub smoothness: f64,
    /// Known minimum of the mean loss, when available.
    pub f_star: Option<f64>,
}

impl LossModel {
    pub fn mse_linear(dim: usize) -> Result<Self> {
        ensure!(dim >= 1, "dimension must be at least 1");
        Ok(Self {
            kind: LossKind::MseLinear,
            dim,
            classes: 1,
            smoothness: 0.0,
            f_star: None,
        })
    }

    pub fn softmax_linear(dim: usize, classes: usize) -> Result<Self> {
        ensure!(dim >= 1, "dimension must be at least 1");
        ensure!(classes >= 2, "softmax needs at least 2 classes, got {classes}");
        Ok(Self {
            kind: LossKind::SoftmaxLinear,
            dim,
            classes,
            smoothness: 0.0,
            f_star: None,
        })
    }

    pub fn with_smoothness(mut self, smoothness: f64) -> Self {
        self.smoothness = smoothness;
        self
    }

    pub fn with_f_star(mut self, f_star: f64) -> Self {
        self.f_star = Some(f_star);
        self
    }

    /// Length of the parameter vector for this model.
    pub fn param_len(&self) -> usize {
        match self.kind {
            LossKind::MseLinear => self.dim,
            LossKind::SoftmaxLinear => self.dim * self.classes,
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        ensure!(
            params.len() == self.param_len(),
            "parameter length {} does not match model ({})",
            params.len(),
            self.param_len()
        );
        Ok(())
    }

    fn check_example(&self, ex: &LabeledExample) -> Result<()> {
        ensure!(
            ex.features.len() == self.dim,
            "feature length {} does not match model dimension {}",
            ex.features.len(),
            self.dim
        );
        match (self.kind, ex.target) {
            (LossKind::MseLinear, Target::Value(_)) => Ok(()),
            (LossKind::SoftmaxLinear, Target::Class(c)) if c < self.classes => Ok(()),
            (LossKind::SoftmaxLinear, Target::Class(c)) => Err(invalid(format!(
                "class index {c} out of range for {} classes",
                self.classes
            ))),
            _ => Err(invalid("target type does not match the model kind")),
        }
    }

    fn sample_loss(&self, params: &[f64], ex: &LabeledExample) -> f64 {
        match (self.kind, ex.target) {
            (LossKind::MseLinear, Target::Value(y)) => {
                let r = dot(params, &ex.features) - y;
                0.5 * r * r
            }
            (LossKind::SoftmaxLinear, Target::Class(y)) => {
                let logits = self.logits(params, &ex.features);
                log_sum_exp(&logits) - logits[y]
            }
            _ => unreachable!("checked by check_example"),
        }
    }

    /// Adds `scale · ∇ℓ(x, w)` into `out`.
    fn add_sample_gradient(&self, params: &[f64], ex: &LabeledExample, scale: f64, out: &mut [f64]) {
        match (self.kind, ex.target) {
            (LossKind::MseLinear, Target::Value(y)) => {
                let r = scale * (dot(params, &ex.features) - y);
                axpy(r, &ex.features, out);
            }
            (LossKind::SoftmaxLinear, Target::Class(y)) => {
                let mut probs = self.logits(params, &ex.features);
                softmax_in_place(&mut probs);
                for (c, p) in probs.iter().enumerate() {
                    let coef = scale * (p - if c == y { 1.0 } else { 0.0 });
                    let row = &mut out[c * self.dim..(c + 1) * self.dim];
                    axpy(coef, &ex.features, row);
                }
            }
            _ => unreachable!("checked by check_example"),
        }
    }

    fn logits(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        params.chunks_exact(self.dim).map(|row| dot(row, x)).collect()
    }

    /// Predicted class (argmax logit); regression models return 0.
    pub fn predict_class(&self, params: &ParamVector, features: &[f64]) -> usize {
        match self.kind {
            LossKind::MseLinear => 0,
            LossKind::SoftmaxLinear => {
                let logits = self.logits(params, features);
                logits
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (c, &z)| if z > best.1 { (c, z) } else { best },
                    )
                    .0
            }
        }
    }
}

/// Mean per-sample loss over `batch`.
pub fn loss(model: &LossModel, params: &ParamVector, batch: &[LabeledExample]) -> Result<f64> {
    loss_over(model, params, batch.iter())
}

/// Mean loss over the examples of `dataset` selected by `indices`.
pub fn loss_indexed(
    model: &LossModel,
    params: &ParamVector,
    dataset: &[LabeledExample],
    indices: &[usize],
) -> Result<f64> {
    loss_over(model, params, select(dataset, indices)?)
}

/// Mean stochastic gradient over `batch`.
pub fn gradient(model: &LossModel, params: &ParamVector, batch: &[LabeledExample]) -> Result<ParamVector> {
    gradient_over(model, params, batch.iter())
}

/// Mean gradient over the examples of `dataset` selected by `indices`.
pub fn gradient_indexed(
    model: &LossModel,
    params: &ParamVector,
    dataset: &[LabeledExample],
    indices: &[usize],
) -> Result<ParamVector> {
    gradient_over(model, params, select(dataset, indices)?)
}

/// Exact gradient of the mean loss over the whole dataset.
pub fn full_gradient(model: &LossModel, params: &ParamVector, dataset: &[LabeledExample]) -> Result<ParamVector> {
    gradient(model, params, dataset)
}

fn select<'a>(
    dataset: &'a [LabeledExample],
    indices: &'a [usize],
) -> Result<impl Iterator<Item = &'a LabeledExample> + Clone> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(invalid(format!(
            "example index {bad} out of range for dataset of {}",
            dataset.len()
        )));
    }
    Ok(indices.iter().map(move |&i| &dataset[i]))
}

fn loss_over<'a>(
    model: &LossModel,
    params: &ParamVector,
    examples: impl Iterator<Item = &'a LabeledExample>,
) -> Result<f64> {
    model.check_params(params)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        model.check_example(ex)?;
        total += model.sample_loss(params, ex);
        count += 1;
    }
    ensure!(count > 0, "batch is empty");
    Ok(total / count as f64)
}

fn gradient_over<'a>(
    model: &LossModel,
    params: &ParamVector,
    examples: impl Iterator<Item = &'a LabeledExample> + Clone,
) -> Result<ParamVector> {
    model.check_params(params)?;
    let count = examples.clone().count();
    ensure!(count > 0, "batch is empty");
    let scale = 1.0 / count as f64;
    let mut out = vec![0.0; model.param_len()];
    for ex in examples {
        model.check_example(ex)?;
        model.add_sample_gradient(params, ex, scale, &mut out);
    }
    Ok(ParamVector::from_raw(out))
}

/// Smoothness constant of the mean loss over `dataset`.
///
/// For `MseLinear` this is `λ_max((1/m)XᵀX)`; for `SoftmaxLinear` it is the
/// upper bound `½ λ_max((1/m)XᵀX)`, since the softmax Jacobian
/// `diag(p) − ppᵀ` has spectral norm at most ½.
pub fn smoothness_constant(model: &LossModel, dataset: &[LabeledExample]) -> Result<f64> {
    ensure!(!dataset.is_empty(), "dataset is empty");
    for ex in dataset {
        model.check_example(ex)?;
    }
    let gram = second_moment(dataset.iter().map(|ex| ex.features.as_slice()), model.dim);
    // a residual of 1e-10·λ pins some eigenvalue to well inside 1e-8 relative
    let top = top_eigenvalue(&gram, model.dim, 1e-10);
    Ok(match model.kind {
        LossKind::MseLinear => top,
        LossKind::SoftmaxLinear => 0.5 * top,
    })
}

/// `(1/m) Σ x xᵀ` as a dense row-major `d × d` matrix.
pub(crate) fn second_moment<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut gram = vec![0.0; dim * dim];
    let mut count = 0usize;
    for x in rows {
        for i in 0..dim {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            // upper triangle only, mirrored below
            for j in i..dim {
                gram[i * dim + j] += xi * x[j];
            }
        }
        count += 1;
    }
    let inv = 1.0 / count.max(1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = gram[i * dim + j] * inv;
            gram[i * dim + j] = v;
            gram[j * dim + i] = v;
        }
    }
    gram
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration. Stops once the residual `‖Av − λv‖ ≤ tol·λ`.
pub(crate) fn top_eigenvalue(matrix: &[f64], dim: usize, tol: f64) -> f64 {
    const MAX_ITERS: usize = 200_000;
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut av = vec![0.0; dim];
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERS {
        mat_vec(matrix, &v, &mut av);
        lambda = dot(&v, &av);
        let norm = norm_sq(&av).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let residual: f64 = av
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= tol * lambda.abs() {
            break;
        }
        for (vi, ai) in v.iter_mut().zip(&av) {
            *vi = ai / norm;
        }
    }
    lambda
}

/// Central-difference estimate of `∇f` at `point`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Result<Vec<f64>> {
    ensure!(
        step > 0.0 && step.is_finite(),
        "finite-difference step must be positive, got {step}"
    );
    let mut probe = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Central-difference gradient of [`loss`]; a test oracle for [`gradient`].
pub fn finite_difference_gradient(
    model: &LossModel,
    params: &ParamVector,
    batch: &[LabeledExample],
    step: f64,
) -> Result<ParamVector> {
    ensure!(
        step > 0.0 && step.is_finite(),
        "finite-difference step must be positive, got {step}"
    );
    // surface dimension and emptiness errors before probing
    loss(model, params, batch)?;
    let grad = central_difference(
        |w| loss(model, &ParamVector::from_raw(w.to_vec()), batch).unwrap_or(f64::NAN),
        params,
        step,
    )?;
    Ok(ParamVector::from_raw(grad))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn mat_vec(matrix: &[f64], v: &[f64], out: &mut [f64]) {
    let dim = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&matrix[i * dim..(i + 1) * dim], v);
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}
