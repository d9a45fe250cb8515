//! Matrix-free Fisher information operator and extremal eigen-distortions.
//!
//! Under additive white Gaussian response noise the Fisher matrix of a model
//! `f` at image `x` is `J = (df/dx)^T (df/dx)`. It is never formed: products
//! are a JVP followed by a VJP.

use serde::{Serialize, Serializer};

use crate::diffmodel::{dense_jacobian_fd, Linearization, ModelChain};
use crate::linalg::jacobi_eigen;
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, gaussian_noise2, Grid2};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

pub struct FimOperator<'a> {
    lin: Linearization<'a>,
    scale: f64,
}

impl<'a> FimOperator<'a> {
    pub fn new(model: &'a ModelChain, x: &Grid2) -> Result<Self> {
        Ok(Self {
            lin: model.linearize(x)?,
            scale: 1.0,
        })
    }

    /// Operator for the model with outputs multiplied by `c`, i.e. `c² J`.
    pub fn scaled(model: &'a ModelChain, x: &Grid2, c: f64) -> Result<Self> {
        Ok(Self {
            lin: model.linearize(x)?,
            scale: c * c,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.lin.chain().input_shape();
        (s.height, s.width)
    }

    pub fn apply(&self, v: &Grid2) -> Result<Grid2> {
        let u = self.lin.jvp(v)?;
        let w = self.lin.vjp(&u)?;
        Ok(if self.scale == 1.0 { w } else { w.scaled(self.scale) })
    }

    /// `⟨v, J v⟩ = ‖(df/dx) v‖²`
    pub fn quadratic_form(&self, v: &Grid2) -> Result<f64> {
        let u = self.lin.jvp(v)?;
        Ok(self.scale * u.dot(&u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterConfig {
    pub seed: u64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

impl IterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::ParamDomain(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::ParamDomain("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Telemetry {
    pub iterations: usize,
    pub converged: bool,
    /// `‖J e − λ e‖ / max(λ, tiny)` at the returned vector.
    pub residual: f64,
    /// Iteration magnitudes `‖A v_k‖` per step.
    pub history: Vec<f64>,
    /// Rayleigh quotient `⟨e, J e⟩` of the returned vector.
    pub rayleigh: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub lambda: f64,
    pub vector: Grid2,
    pub telemetry: Telemetry,
}

/// Flip sign so the largest-magnitude entry is positive.
fn canonical_sign(v: &mut Grid2) {
    let mut best = 0.0_f64;
    let mut sign = 1.0;
    for &x in v.data() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        for x in v.data_mut() {
            *x = -*x;
        }
    }
}

fn unit_noise(seed: u64, dims: (usize, usize)) -> Grid2 {
    let v = gaussian_noise2(seed, dims.0, dims.1);
    let n = v.norm();
    v.scaled(1.0 / n)
}

/// Shared loop for `A = J - shift·I`: `v <- A v / ‖A v‖` until both the
/// magnitude and the eigen-residual settle. Returns the final unit vector, history, and convergence flag.
fn iterate(
    op: &FimOperator,
    shift: f64,
    mut v: Grid2,
    cfg: &IterConfig,
) -> Result<(Grid2, Vec<f64>, bool)> {
    let mut history = Vec::new();
    let mut converged = false;
    // the start vector's Rayleigh magnitude plays the role of the previous estimate
    let mut prev = f64::NAN;
    for k in 0..cfg.max_iters {
        let mut w = op.apply(&v)?;
        if shift != 0.0 {
            w = w.add_scaled(-shift, &v);
        }
        let n = w.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::RankZero { iteration: k });
        }
        let rq = v.dot(&w);
        if k == 0 {
            prev = rq.abs();
        }
        let settled = (n - prev).abs() <= cfg.tol * n;
        // the magnitude alone can stall long before the vector does
        let resid = if settled { w.add_scaled(-rq, &v).norm() } else { f64::INFINITY };
        history.push(n);
        v = w.scaled(1.0 / n);
        if settled && resid <= cfg.tol * n {
            converged = true;
            break;
        }
        prev = n;
    }
    canonical_sign(&mut v);
    Ok((v, history, converged))
}

fn residual(op: &FimOperator, v: &Grid2, lambda: f64) -> Result<(f64, f64)> {
    let jv = op.apply(v)?;
    let rayleigh = v.dot(&jv);
    let r = jv.add_scaled(-lambda, v).norm() / lambda.abs().max(f64::MIN_POSITIVE);
    Ok((r, rayleigh))
}

/// Dominant eigenpair by power iteration from seeded white noise.
pub fn power_iterate(op: &FimOperator, cfg: &IterConfig) -> Result<EigenPair> {
    cfg.validate()?;
    let v0 = unit_noise(cfg.seed, op.dims());
    let (v, history, converged) = iterate(op, 0.0, v0, cfg)?;
    let (_, rayleigh) = residual(op, &v, 1.0)?;
    let (res, _) = residual(op, &v, rayleigh)?;
    Ok(EigenPair {
        lambda: rayleigh,
        vector: v,
        telemetry: Telemetry {
            iterations: history.len(),
            converged,
            residual: res,
            history,
            rayleigh,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeflatedPair {
    pub pair: EigenPair,
    /// Magnitude `μ` of the dominant eigenvalue of `J - λ_max I`.
    pub mu: f64,
    pub degenerate_spectrum: bool,
    pub rank_deficient: bool,
}

/// Minimal eigenpair by power iteration on `J - λ_max I`. `λ_min` is the
/// Rayleigh quotient of the final vector (`≈ λ_max - μ`); its residual is
/// measured relative to `λ_max`.
pub fn deflated_iterate(op: &FimOperator, lambda_max: f64, cfg: &IterConfig) -> Result<DeflatedPair> {
    cfg.validate()?;
    let v0 = unit_noise(cfg.seed, op.dims());
    let first = op.apply(&v0)?.add_scaled(-lambda_max, &v0);
    if first.norm() <= cfg.tol * lambda_max {
        // every vector is (numerically) an eigenvector
        let mut v = v0;
        canonical_sign(&mut v);
        let (res, rayleigh) = residual(op, &v, lambda_max)?;
        return Ok(DeflatedPair {
            pair: EigenPair {
                lambda: lambda_max,
                vector: v,
                telemetry: Telemetry {
                    iterations: 1,
                    converged: true,
                    residual: res,
                    history: vec![first.norm()],
                    rayleigh,
                },
            },
            mu: 0.0,
            degenerate_spectrum: true,
            rank_deficient: false,
        });
    }
    let (v, history, converged) = iterate(op, lambda_max, v0, cfg)?;
    let jv = op.apply(&v)?;
    let mu = jv.add_scaled(-lambda_max, &v).norm();
    // the Rayleigh quotient avoids the cancellation in lambda_max - mu
    let rayleigh = v.dot(&jv);
    let lambda_min = rayleigh.clamp(0.0, lambda_max);
    let res = jv.add_scaled(-lambda_min, &v).norm() / lambda_max;
    Ok(DeflatedPair {
        pair: EigenPair {
            lambda: lambda_min,
            vector: v,
            telemetry: Telemetry {
                iterations: history.len(),
                converged,
                residual: res,
                history,
                rayleigh,
            },
        },
        mu,
        degenerate_spectrum: mu <= cfg.tol * lambda_max,
        rank_deficient: lambda_min < cfg.tol * lambda_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EigenFlags {
    pub converged_max: bool,
    pub converged_min: bool,
    pub degenerate_spectrum: bool,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    pub lambda_max: f64,
    pub e_max: Grid2,
    pub lambda_min: f64,
    pub e_min: Grid2,
    pub telemetry_max: Telemetry,
    pub telemetry_min: Telemetry,
    pub seed: u64,
    pub flags: EigenFlags,
}

impl EigenResult {
    pub fn iterations(&self) -> (usize, usize) {
        (self.telemetry_max.iterations, self.telemetry_min.iterations)
    }

    pub fn converged(&self) -> bool {
        self.flags.converged_max && self.flags.converged_min
    }

    pub fn log_ratio(&self) -> LogRatio {
        predicted_log_threshold_ratio(self)
    }
}

/// Power iteration for the maximal pair, then deflated iteration for the
/// minimal pair. Start vectors use independent streams derived from `cfg.seed`.
pub fn synthesize(model: &ModelChain, x: &Grid2, cfg: &IterConfig) -> Result<EigenResult> {
    let op = FimOperator::new(model, x)?;
    synthesize_with(&op, cfg)
}

pub fn synthesize_with(op: &FimOperator, cfg: &IterConfig) -> Result<EigenResult> {
    let max = power_iterate(
        op,
        &IterConfig {
            seed: derive_seed(cfg.seed, &[0]),
            ..*cfg
        },
    )?;
    let min = deflated_iterate(
        op,
        max.lambda,
        &IterConfig {
            seed: derive_seed(cfg.seed, &[1]),
            ..*cfg
        },
    )?;
    Ok(EigenResult {
        lambda_max: max.lambda,
        e_max: max.vector,
        lambda_min: min.pair.lambda,
        e_min: min.pair.vector,
        flags: EigenFlags {
            converged_max: max.telemetry.converged,
            converged_min: min.pair.telemetry.converged,
            degenerate_spectrum: min.degenerate_spectrum,
            rank_deficient: min.rank_deficient,
        },
        telemetry_max: max.telemetry,
        telemetry_min: min.pair.telemetry,
        seed: cfg.seed,
    })
}

/// Full spectrum of the Fisher matrix from a central-difference Jacobian.
/// Only for small images (see [`crate::diffmodel::DENSE_JACOBIAN_LIMIT`]).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSpectrum {
    /// Ascending.
    pub values: Vec<f64>,
    pub lambda_max: f64,
    pub e_max: Grid2,
    pub lambda_min: f64,
    pub e_min: Grid2,
    /// Orthonormal eigenvectors, one per entry of `values`.
    pub vectors: Vec<Grid2>,
}

pub fn dense_spectrum(model: &ModelChain, x: &Grid2, fd_step: Option<f64>) -> Result<DenseSpectrum> {
    let (h, w) = x.dims();
    let jac = dense_jacobian_fd(model, x, fd_step)?;
    let eig = jacobi_eigen(&jac.gram())?;
    let vectors = (0..eig.values.len())
        .map(|k| {
            let mut v = Grid2::from_vec(h, w, eig.vector(k))?;
            canonical_sign(&mut v);
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = eig.values.len();
    Ok(DenseSpectrum {
        lambda_max: eig.values[n - 1],
        e_max: vectors[n - 1].clone(),
        lambda_min: eig.values[0].max(0.0),
        e_min: vectors[0].clone(),
        values: eig.values,
        vectors,
    })
}

/// `½ ln(λ_max / λ_min)`, or an explicit infinity when the model is blind
/// along `e_min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogRatio {
    Finite(f64),
    Infinite,
}

impl LogRatio {
    pub fn value(self) -> f64 {
        match self {
            LogRatio::Finite(v) => v,
            LogRatio::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, LogRatio::Infinite)
    }
}

impl Serialize for LogRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LogRatio::Finite(v) => s.serialize_f64(*v),
            LogRatio::Infinite => s.serialize_str("inf"),
        }
    }
}

pub fn log_ratio_from(lambda_max: f64, lambda_min: f64) -> LogRatio {
    if lambda_min <= 0.0 {
        LogRatio::Infinite
    } else {
        LogRatio::Finite(0.5 * (lambda_max.ln() - lambda_min.ln()))
    }
}

pub fn predicted_log_threshold_ratio(res: &EigenResult) -> LogRatio {
    if res.flags.rank_deficient {
        LogRatio::Infinite
    } else {
        log_ratio_from(res.lambda_max, res.lambda_min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmodel::{dense_jacobian_fd, DenseLinear, Scale};
    use crate::fixtures::fixture_image;
    use crate::linalg::{jacobi_eigen, Matrix};
    use crate::tensor::Shape;
    use crate::zoo::{lgg_model, ln_model, onoff_model, LgnChannel, OnOffParams};
    use std::sync::Arc;

    fn diag_model(d: &[f64]) -> ModelChain {
        let n = d.len();
        let mut a = Matrix::zeros(n, n);
        for (i, v) in d.iter().enumerate() {
            a[(i, i)] = *v;
        }
        let stage = DenseLinear::new(a, Shape::new(1, 1, n)).unwrap();
        ModelChain::new(1, n, vec![Arc::new(stage)]).unwrap()
    }

    #[test]
    fn mse_operator_is_identity() {
        let m = ModelChain::identity(5, 4);
        let x = fixture_image(1, 5, 4);
        let op = FimOperator::new(&m, &x).unwrap();
        let v = gaussian_noise2(3, 5, 4);
        assert_eq!(op.apply(&v).unwrap(), v);
        let r = synthesize(&m, &x, &IterConfig::default()).unwrap();
        assert_eq!(r.telemetry_max.iterations, 1);
        assert!((r.lambda_max - 1.0).abs() < 1e-9 && (r.lambda_min - 1.0).abs() < 1e-9);
        assert!(r.flags.degenerate_spectrum);
        assert_eq!(r.log_ratio(), LogRatio::Finite(0.0));
    }

    #[test]
    fn diagonal_spectrum() {
        let m = diag_model(&[3.0, 1.0, 1.0, 1.0]);
        let x = Grid2::zeros(1, 4);
        let cfg = IterConfig {
            tol: 1e-14,
            ..IterConfig::default()
        };
        let r = synthesize(&m, &x, &cfg).unwrap();
        assert!((r.lambda_max - 9.0).abs() < 1e-9);
        assert!((r.e_max.data()[0].abs() - 1.0).abs() < 1e-9);
        assert!((r.lambda_min - 1.0).abs() < 1e-9);
        assert!(r.e_min.data()[0].abs() < 1e-6);
        match r.log_ratio() {
            LogRatio::Finite(v) => assert!((v - 3f64.ln()).abs() < 1e-9),
            LogRatio::Infinite => panic!(),
        }
        let m2 = diag_model(&[3.0, 1.0]);
        let r2 = synthesize(&m2, &Grid2::zeros(1, 2), &cfg).unwrap();
        assert!((r2.lambda_min - 1.0).abs() < 1e-9);
        assert!((r2.e_min.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_model_operator_is_gram() {
        let mut flat = vec![0.0; 30];
        crate::tensor::NormalStream::new(4).fill(&mut flat);
        let a = Matrix::from_vec(5, 6, flat).unwrap();
        let m = ModelChain::new(
            2,
            3,
            vec![Arc::new(DenseLinear::new(a.clone(), Shape::new(1, 1, 5)).unwrap())],
        )
        .unwrap();
        let v = gaussian_noise2(9, 2, 3);
        let op = FimOperator::new(&m, &Grid2::zeros(2, 3)).unwrap();
        let got = op.apply(&v).unwrap();
        let want = a.gram().mul_vec(v.data());
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_psd_and_matches_dense_fd() {
        let x = fixture_image(2, 8, 8);
        let m = lgg_model(&LgnChannel::default(), 8, 8).unwrap();
        let op = FimOperator::new(&m, &x).unwrap();
        for k in 0..20 {
            let u = gaussian_noise2(10 + k, 8, 8);
            let v = gaussian_noise2(50 + k, 8, 8);
            let a = u.dot(&op.apply(&v).unwrap());
            let b = op.apply(&u).unwrap().dot(&v);
            assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()));
            assert!(v.dot(&op.apply(&v).unwrap()) >= -1e-10);
        }
        let jac = dense_jacobian_fd(&m, &x, None).unwrap();
        let v = gaussian_noise2(77, 8, 8);
        let want = jac.tr_mul_vec(&jac.mul_vec(v.data()));
        let got = op.apply(&v).unwrap();
        let err: f64 = got
            .data()
            .iter()
            .zip(&want)
            .map(|(g, w)| (g - w).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-4 * got.norm());
    }

    #[test]
    fn power_history_is_monotone_and_matches_oracle() {
        let x = fixture_image(3, 8, 8);
        let m = lgg_model(&LgnChannel::default(), 8, 8).unwrap();
        let cfg = IterConfig {
            seed: 5,
            tol: 1e-13,
            max_iters: 200_000,
        };
        let r = synthesize(&m, &x, &cfg).unwrap();
        for w in r.telemetry_max.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[1]);
        }
        for w in r.telemetry_min.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[1]);
        }
        let gram = dense_jacobian_fd(&m, &x, None).unwrap().gram();
        let eig = jacobi_eigen(&gram).unwrap();
        let top = *eig.values.last().unwrap();
        assert!((r.lambda_max - top).abs() <= 1e-3 * top);
        assert!((r.lambda_min - eig.values[0]).abs() <= (1e-3 * eig.values[0]).max(1e-6 * top));
        assert!(r.e_max.norm() - 1.0 < 1e-10 && r.e_min.norm() - 1.0 < 1e-10);
        assert!(r.e_max.dot(&r.e_min).abs() <= 1e-3);
    }

    #[test]
    fn rayleigh_bound_and_scale_equivariance() {
        let x = fixture_image(4, 8, 8);
        let m = onoff_model(&OnOffParams::default(), 8, 8).unwrap();
        let cfg = IterConfig {
            seed: 1,
            tol: 1e-13,
            max_iters: 200_000,
        };
        let r = synthesize(&m, &x, &cfg).unwrap();
        let op = FimOperator::new(&m, &x).unwrap();
        for k in 0..20 {
            let v = gaussian_noise2(300 + k, 8, 8);
            let v = v.scaled(1.0 / v.norm());
            let q = op.quadratic_form(&v).unwrap();
            assert!(q >= r.lambda_min - 1e-6 && q <= r.lambda_max + 1e-6);
        }
        let mut stages = m.stages().to_vec();
        stages.push(Arc::new(Scale(3.0)));
        let m3 = ModelChain::new(8, 8, stages).unwrap();
        let r3 = synthesize(&m3, &x, &cfg).unwrap();
        assert!((r3.lambda_max / r.lambda_max - 9.0).abs() < 1e-6 * 9.0);
        let ratio = r.lambda_max / r.lambda_min;
        assert!((r3.lambda_max / r3.lambda_min - ratio).abs() <= 1e-6 * ratio);
        assert!(r3.e_max.dot(&r.e_max).abs() >= 1.0 - 1e-6);
        assert!(r3.e_min.dot(&r.e_min).abs() >= 1.0 - 1e-6);
    }

    #[test]
    fn ln_is_rank_deficient() {
        let x = fixture_image(5, 8, 8);
        let m = ln_model(&LgnChannel::default(), 8, 8).unwrap();
        let cfg = IterConfig {
            seed: 2,
            ..IterConfig::default()
        };
        let r = synthesize(&m, &x, &cfg).unwrap();
        assert!(r.flags.rank_deficient);
        assert!(r.lambda_min < 1e-8 * r.lambda_max);
        assert!(r.log_ratio().is_infinite());
        assert_eq!(serde_json::to_string(&r.log_ratio()).unwrap(), "\"inf\"");
    }

    #[test]
    fn synthesis_is_deterministic() {
        let x = fixture_image(6, 8, 8);
        let m = lgg_model(&LgnChannel::default(), 8, 8).unwrap();
        let cfg = IterConfig::default();
        assert_eq!(synthesize(&m, &x, &cfg).unwrap(), synthesize(&m, &x, &cfg).unwrap());
    }

    #[test]
    fn constant_model_signals_rank_zero() {
        let m = ModelChain::new(2, 2, vec![Arc::new(Scale(0.0))]).unwrap();
        let err = synthesize(&m, &Grid2::zeros(2, 2), &IterConfig::default()).unwrap_err();
        assert!(matches!(err, Error::RankZero { iteration: 0 }));
    }

    #[test]
    fn log_ratio_arithmetic() {
        assert_eq!(log_ratio_from(2.0, 2.0), LogRatio::Finite(0.0));
        assert!((log_ratio_from(9.0, 1.0).value() - 3f64.ln()).abs() < 1e-15);
        assert!(log_ratio_from(1.0, 0.0).is_infinite());
    }
}
