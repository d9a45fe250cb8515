//! Fitting model parameters to distortion ratings.
//!
//! The objective is the Pearson correlation between model distance
//! `D = ‖f(x) − f(x′)‖` and distortion scores, maximized by Adam on the
//! unconstrained parameter vector with L2 weight decay.

pub mod nnls;
pub mod synthetic;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmodel::ModelChain;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::{derive_seed, Grid2, Grid3, NormalStream};
use crate::zoo::{ModelKind, ModelSpec};

pub use nnls::{nnls, NnlsSolution};
pub use synthetic::{generate_synthetic_dataset, ScoreNoise, SyntheticConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub reference: Grid2,
    pub distorted: Grid2,
    /// Larger means more distorted.
    pub score: f64,
}

/// Direction of a score scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Larger scores mean higher quality (e.g. mean opinion scores).
    Quality,
    #[default]
    Distortion,
}

impl Polarity {
    /// Map a raw score to the distortion-increasing convention.
    pub fn canonical(self, score: f64) -> f64 {
        match self {
            Polarity::Quality => -score,
            Polarity::Distortion => score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 20,
            seed: 0,
            holdout_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("eps_adam", self.eps_adam),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::ParamDomain(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::ParamDomain(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::ParamDomain("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::ParamDomain(format!(
                "holdout_fraction must lie in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.batch_size < 3 {
            return Err(Error::ParamDomain("batch_size must be at least 3".into()));
        }
        Ok(())
    }
}

fn check_pair(model: &ModelChain, x: &Grid2, y: &Grid2) -> Result<()> {
    if !x.same_dims(y) {
        return Err(Error::Shape(format!(
            "image pair is {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let s = model.input_shape();
    if x.dims() != (s.height, s.width) {
        return Err(Error::Shape(format!(
            "model expects {}x{} images, got {}x{}",
            s.height,
            s.width,
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// `‖f(x) − f(x′)‖₂`
pub fn perceptual_distance(model: &ModelChain, x: &Grid2, x2: &Grid2) -> Result<f64> {
    check_pair(model, x, x2)?;
    Ok(model.forward(x)?.add_scaled(-1.0, &model.forward(x2)?).norm())
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 3 points, got {}",
            a.len()
        )));
    }
    let (ca, cb) = (centered(a), centered(b));
    let saa: f64 = ca.iter().map(|x| x * x).sum();
    let sbb: f64 = cb.iter().map(|x| x * x).sum();
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    let sab: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `∂ρ/∂a_i` for `ρ = pearson(a, b)`.
fn pearson_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let rho = pearson(a, b)?;
    let (ca, cb) = (centered(a), centered(b));
    let saa: f64 = ca.iter().map(|x| x * x).sum();
    let sbb: f64 = cb.iter().map(|x| x * x).sum();
    let norm = (saa * sbb).sqrt();
    let g = ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| y / norm - rho * x / saa)
        .collect();
    Ok((rho, g))
}

fn scores(records: &[DatasetRecord]) -> Vec<f64> {
    records.iter().map(|r| r.score).collect()
}

pub fn distances(model: &ModelChain, records: &[DatasetRecord]) -> Result<Vec<f64>> {
    records
        .par_iter()
        .map(|r| perceptual_distance(model, &r.reference, &r.distorted))
        .collect()
}

/// Pearson correlation of model distances with scores.
pub fn evaluate(model: &ModelChain, records: &[DatasetRecord]) -> Result<f64> {
    pearson(&distances(model, records)?, &scores(records))
}

/// Distance and its gradient with respect to the constrained parameters.
fn distance_and_param_grad(model: &ModelChain, r: &DatasetRecord) -> Result<(f64, Vec<f64>)> {
    check_pair(model, &r.reference, &r.distorted)?;
    let la = model.linearize(&r.reference)?;
    let lb = model.linearize(&r.distorted)?;
    let diff: Grid3 = la.output().add_scaled(-1.0, lb.output());
    let d = diff.norm();
    if d == 0.0 {
        // the norm has no gradient at zero; its subgradient set contains 0
        return Ok((0.0, vec![0.0; model.param_count()]));
    }
    let u = diff.scaled(1.0 / d);
    let ga = la.param_vjp(&u)?;
    let gb = lb.param_vjp(&u)?;
    Ok((d, ga.iter().zip(&gb).map(|(a, b)| a - b).collect()))
}

/// Objective value and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    /// Pearson correlation of distances and scores.
    pub rho: f64,
    /// `ρ − ½ λ_wd ‖θ‖²`, the quantity being ascended.
    pub regularized: f64,
    /// Gradient of `regularized` with respect to `θ`.
    pub gradient: Vec<f64>,
}

pub fn objective_and_gradient(
    spec: &ModelSpec,
    batch: &[DatasetRecord],
    weight_decay: f64,
) -> Result<Objective> {
    if batch.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "batch needs at least 3 records, got {}",
            batch.len()
        )));
    }
    let (h, w) = batch[0].reference.dims();
    let model = spec.build(h, w)?;
    let per: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|r| distance_and_param_grad(&model, r))
        .collect::<Result<_>>()?;
    let d: Vec<f64> = per.iter().map(|p| p.0).collect();
    let (rho, drho) = pearson_grad(&d, &scores(batch))?;
    let mut gp = vec![0.0; model.param_count()];
    for (i, ((_, g), c)) in per.iter().zip(&drho).enumerate() {
        if g.iter().any(|v| !v.is_finite()) || !c.is_finite() {
            return Err(Error::NonFiniteGradient { record: i });
        }
        for (acc, gi) in gp.iter_mut().zip(g) {
            *acc += c * gi;
        }
    }
    let mut gradient = spec.transform().pullback(&spec.theta, &gp)?;
    for (g, t) in gradient.iter_mut().zip(&spec.theta) {
        *g -= weight_decay * t;
    }
    if let Some(i) = gradient.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { record: i });
    }
    let penalty: f64 = spec.theta.iter().map(|t| t * t).sum::<f64>();
    Ok(Objective {
        rho,
        regularized: rho - 0.5 * weight_decay * penalty,
        gradient,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Bias-corrected Adam ascent step, in place.
pub fn adam_step(state: &mut AdamState, theta: &mut [f64], gradient: &[f64], cfg: &TrainConfig) {
    assert_eq!(theta.len(), gradient.len());
    assert_eq!(state.m.len(), theta.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..theta.len() {
        let g = gradient[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        theta[i] += cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps_adam);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rho_train: f64,
    pub rho_holdout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters with the best holdout correlation (training correlation
    /// when there is no holdout set).
    pub spec: ModelSpec,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub holdout: Vec<usize>,
}

fn shuffle(indices: &mut [usize], seed: u64) {
    let mut rng = NormalStream::new(seed);
    for i in (1..indices.len()).rev() {
        let j = rng.below(i + 1);
        indices.swap(i, j);
    }
}

/// Fixed holdout split: a seeded permutation, last `⌈f·n⌉` records held out.
pub fn split_holdout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, derive_seed(seed, &[0]));
    let k = (fraction * n as f64).ceil() as usize;
    let hold = idx.split_off(n - k.min(n));
    (idx, hold)
}

fn subset(records: &[DatasetRecord], idx: &[usize]) -> Vec<DatasetRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

fn refresh_divisors(spec: &mut ModelSpec, records: &[DatasetRecord]) -> Result<()> {
    if spec.kind != ModelKind::Cnn {
        return Ok(());
    }
    let images: Vec<Grid2> = records
        .iter()
        .flat_map(|r| [r.reference.clone(), r.distorted.clone()])
        .collect();
    let mut p = spec.cnn_params()?;
    p.calibrate_divisors(&images)?;
    spec.bn_divisors = p.divisors;
    Ok(())
}

pub fn train(initial: &ModelSpec, dataset: &[DatasetRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.len() < 10 {
        return Err(Error::ParamDomain(format!(
            "training needs at least 10 records, got {}",
            dataset.len()
        )));
    }
    let (train_idx, hold_idx) = split_holdout(dataset.len(), cfg.holdout_fraction, cfg.seed);
    let train_set = subset(dataset, &train_idx);
    let hold_set = subset(dataset, &hold_idx);
    if train_set.len() < 3 {
        return Err(Error::ParamDomain("training split has fewer than 3 records".into()));
    }
    let (h, w) = dataset[0].reference.dims();
    let mut spec = initial.clone();
    refresh_divisors(&mut spec, &train_set)?;
    let mut adam = AdamState::new(spec.theta.len());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelSpec)> = None;
    for epoch in 1..=cfg.epochs {
        if !spec.theta.is_empty() {
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            shuffle(&mut order, derive_seed(cfg.seed, &[1, epoch as u64]));
            let n = order.len();
            let mut bounds: Vec<(usize, usize)> = (0..n)
                .step_by(cfg.batch_size)
                .map(|s| (s, (s + cfg.batch_size).min(n)))
                .collect();
            // fold a runt batch into its neighbour so every batch has a correlation
            if bounds.len() > 1 && bounds.last().is_some_and(|(s, e)| e - s < 3) {
                let (_, end) = bounds.pop().expect("non-empty");
                bounds.last_mut().expect("non-empty").1 = end;
            }
            for (s, e) in bounds {
                let batch = subset(&train_set, &order[s..e]);
                refresh_divisors(&mut spec, &batch)?;
                let obj = objective_and_gradient(&spec, &batch, cfg.weight_decay)?;
                adam_step(&mut adam, &mut spec.theta, &obj.gradient, cfg);
            }
            refresh_divisors(&mut spec, &train_set)?;
        }
        let model = spec.build(h, w)?;
        let rho_train = evaluate(&model, &train_set)?;
        let rho_holdout = if hold_set.len() >= 3 {
            Some(evaluate(&model, &hold_set)?)
        } else {
            None
        };
        log.push(EpochLog {
            epoch,
            rho_train,
            rho_holdout,
        });
        let score = rho_holdout.unwrap_or(rho_train);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, spec.clone()));
        }
    }
    let (best_spec, best_epoch) = match best {
        Some((_, e, s)) => (s, e),
        None => (spec, 0),
    };
    Ok(TrainOutcome {
        spec: best_spec,
        best_epoch,
        log,
        holdout: hold_idx,
    })
}

/// Training log as line-delimited JSON.
pub fn log_to_jsonl(log: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights {
    /// Indices into the chain's stages whose outputs form the columns.
    pub stages: Vec<usize>,
    pub solution: NnlsSolution,
}

/// Non-negative weights `w` for `Σ_k w_k ‖f_k(x) − f_k(x′)‖²` over the
/// rectified stage outputs `f_k`, fitted by NNLS to the (distortion-increasing)
/// scores.
pub fn fit_stage_weights_nnls(model: &ModelChain, records: &[DatasetRecord]) -> Result<StageWeights> {
    let stages: Vec<usize> = model
        .stages()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.name() == "softplus")
        .map(|(i, _)| i)
        .collect();
    let stages = if stages.is_empty() {
        vec![model.stages().len().saturating_sub(1)]
    } else {
        stages
    };
    if records.len() < stages.len() {
        return Err(Error::ParamDomain(format!(
            "{} records for {} stage weights",
            records.len(),
            stages.len()
        )));
    }
    let rows: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| -> Result<Vec<f64>> {
            check_pair(model, &r.reference, &r.distorted)?;
            let la = model.linearize(&r.reference)?;
            let lb = model.linearize(&r.distorted)?;
            Ok(stages
                .iter()
                .map(|&k| {
                    // points[0] is the input, so stage k's output is points[k + 1]
                    let (a, b) = (&la.points()[k + 1], &lb.points()[k + 1]);
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let r = Matrix::from_rows(&rows)?;
    Ok(StageWeights {
        stages,
        solution: nnls(&r, &scores(records))?,
    })
}
