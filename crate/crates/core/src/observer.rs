//! Simulated 2AFC psychophysics: ideal observers with Gaussian response
//! noise, psychometric fits, 75%-correct thresholds and the D statistic.

use rayon::prelude::*;
use serde::{Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::diffmodel::ModelChain;
use crate::error::{Error, Result};
use crate::fisher::LogRatio;
use crate::tensor::{derive_seed, Grid2, NormalStream};

pub const DEFAULT_CRITERION: f64 = 0.75;
pub const DEFAULT_TRIALS: usize = 120;
pub const DEFAULT_LEVELS: usize = 9;
/// The amplitude grid runs from `center / span` to `center · span`.
pub const DEFAULT_GRID_SPAN: f64 = 4.0;
pub const DEFAULT_MAX_AMPLITUDE: f64 = 10.0;

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn std_normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// Correlate the response difference with the known signal `f(x+αê) − f(x)`.
    /// Proportion correct is `Φ(‖Δ‖ / (√2 σ))`.
    #[default]
    Template,
    /// Pick the interval farther from a third noisy draw of the reference.
    DistanceToReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PsychometricFamily {
    /// `P = Φ((α − m)/s)`; contains the template observer's exact curve.
    #[default]
    LinearAlpha,
    /// `P = 0.5 + 0.5 Φ((ln α − m)/s)`.
    LogAlpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObserverConfig {
    pub sigma: f64,
    pub criterion: f64,
    pub trials_per_vector: usize,
    pub levels: usize,
    pub grid_span: f64,
    /// Analytic thresholds above this are probed at the cap and censored if
    /// still undetectable.
    pub max_amplitude: f64,
    pub rule: DecisionRule,
    pub family: PsychometricFamily,
    pub seed: u64,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            criterion: DEFAULT_CRITERION,
            trials_per_vector: DEFAULT_TRIALS,
            levels: DEFAULT_LEVELS,
            grid_span: DEFAULT_GRID_SPAN,
            max_amplitude: DEFAULT_MAX_AMPLITUDE,
            rule: DecisionRule::default(),
            family: PsychometricFamily::default(),
            seed: 0,
        }
    }
}

impl ObserverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::ParamDomain(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.criterion > 0.5 && self.criterion < 1.0) {
            return Err(Error::ParamDomain(format!(
                "criterion must lie in (0.5, 1), got {}",
                self.criterion
            )));
        }
        if self.levels < 4 {
            return Err(Error::ParamDomain("need at least 4 amplitude levels".into()));
        }
        if self.trials_per_vector < self.levels {
            return Err(Error::ParamDomain(format!(
                "{} trials cannot cover {} levels",
                self.trials_per_vector, self.levels
            )));
        }
        if !(self.grid_span.is_finite() && self.grid_span > 1.0) {
            return Err(Error::ParamDomain(format!("grid span must exceed 1, got {}", self.grid_span)));
        }
        if !(self.max_amplitude.is_finite() && self.max_amplitude > 0.0) {
            return Err(Error::ParamDomain("max amplitude must be positive".into()));
        }
        Ok(())
    }

    /// `β = √2 Φ⁻¹(criterion) σ`
    pub fn beta(&self) -> f64 {
        std::f64::consts::SQRT_2 * std_normal_quantile(self.criterion) * self.sigma
    }
}

/// A detection threshold; `Infinite` marks a censored or blind direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Finite(f64),
    Infinite,
}

impl Threshold {
    pub fn value(self) -> f64 {
        match self {
            Threshold::Finite(v) => v,
            Threshold::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Threshold::Finite(_))
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Finite(v) => s.serialize_f64(*v),
            Threshold::Infinite => s.serialize_str("inf"),
        }
    }
}

/// `ln(T_l / T_m)`; `None` when `T_m` itself is censored.
pub fn threshold_log_ratio(t_max: Threshold, t_min: Threshold) -> Option<LogRatio> {
    match (t_max, t_min) {
        (Threshold::Finite(a), Threshold::Finite(b)) => Some(LogRatio::Finite(b.ln() - a.ln())),
        (Threshold::Finite(_), Threshold::Infinite) => Some(LogRatio::Infinite),
        (Threshold::Infinite, _) => None,
    }
}

fn check_unit(e: &Grid2) -> Result<()> {
    let n = e.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::InputDomain(format!("distortion direction must be unit norm, got {n}")));
    }
    Ok(())
}

/// Ideal-observer threshold under local linearization: `β / ‖J ê‖`.
pub fn analytic_threshold(model: &ModelChain, x: &Grid2, e: &Grid2, cfg: &ObserverConfig) -> Result<Threshold> {
    cfg.validate()?;
    check_unit(e)?;
    let gain = model.jvp(x, e)?.norm();
    Ok(if gain > 0.0 {
        Threshold::Finite(cfg.beta() / gain)
    } else {
        Threshold::Infinite
    })
}

fn correct_count(
    model: &ModelChain,
    x: &Grid2,
    e: &Grid2,
    alpha: f64,
    cfg: &ObserverConfig,
    n_trials: usize,
    seed: u64,
) -> Result<usize> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InputDomain(format!("amplitude must be >= 0, got {alpha}")));
    }
    let r0 = model.forward(x)?;
    let r1 = model.forward(&x.add_scaled(alpha, e))?;
    let delta = r1.add_scaled(-1.0, &r0);
    let sigma = cfg.sigma;
    let hits = match cfg.rule {
        DecisionRule::Template => {
            // ⟨Δ + n₁ − n₀, Δ⟩ / ‖Δ‖ ~ N(‖Δ‖, 2σ²)
            let d = delta.norm();
            (0..n_trials)
                .into_par_iter()
                .filter(|&t| {
                    let z = NormalStream::new(derive_seed(seed, &[t as u64])).next_normal();
                    d + std::f64::consts::SQRT_2 * sigma * z > 0.0
                })
                .count()
        }
        DecisionRule::DistanceToReference => {
            let dl = delta.data();
            (0..n_trials)
                .into_par_iter()
                .filter(|&t| {
                    let mut rng = NormalStream::new(derive_seed(seed, &[t as u64]));
                    let (mut far, mut near) = (0.0, 0.0);
                    for &dv in dl {
                        let n0 = sigma * rng.next_normal();
                        let n1 = sigma * rng.next_normal();
                        let n2 = sigma * rng.next_normal();
                        far += (dv + n1 - n2).powi(2);
                        near += (n0 - n2).powi(2);
                    }
                    far > near
                })
                .count()
        }
    };
    Ok(hits)
}

/// Fraction of `n_trials` 2AFC trials in which the distorted interval
/// `x + αê` is chosen. Trial `t` draws from the stream `derive_seed(seed, [t])`.
pub fn simulate_2afc(
    model: &ModelChain,
    x: &Grid2,
    e: &Grid2,
    alpha: f64,
    cfg: &ObserverConfig,
    n_trials: usize,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if n_trials == 0 {
        return Err(Error::ParamDomain("need at least one trial".into()));
    }
    Ok(correct_count(model, x, e, alpha, cfg, n_trials, seed)? as f64 / n_trials as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsychometricFit {
    pub family: PsychometricFamily,
    /// Amplitude at which the fitted curve crosses the criterion.
    pub threshold: f64,
    /// Location `m` of the cumulative Gaussian.
    pub location: f64,
    /// Spread `s`.
    pub slope: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Fixed at 0.
    pub lapse: f64,
}

fn family_axis(family: PsychometricFamily, alpha: f64) -> f64 {
    match family {
        PsychometricFamily::LinearAlpha => alpha,
        PsychometricFamily::LogAlpha => alpha.ln(),
    }
}

fn family_prob(family: PsychometricFamily, u: f64, m: f64, s: f64) -> f64 {
    let c = std_normal_cdf((u - m) / s);
    match family {
        PsychometricFamily::LinearAlpha => c,
        PsychometricFamily::LogAlpha => 0.5 + 0.5 * c,
    }
}

fn golden<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, iters: usize) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..iters {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    if fa <= fb {
        (a, fa)
    } else {
        (b, fb)
    }
}

const M_GRID: usize = 801;
const GOLDEN_ITERS: usize = 80;

/// Maximum-likelihood cumulative-Gaussian fit to binomial data. `trials`
/// weights each level; pass equal weights with exact probabilities for the
/// infinite-count limit.
pub fn fit_psychometric(
    alphas: &[f64],
    proportions: &[f64],
    trials: &[f64],
    criterion: f64,
    family: PsychometricFamily,
) -> Result<PsychometricFit> {
    let n = alphas.len();
    if proportions.len() != n || trials.len() != n {
        return Err(Error::Shape("alphas, proportions and trials differ in length".into()));
    }
    if n < 4 {
        return Err(Error::ParamDomain(format!("need at least 4 levels, got {n}")));
    }
    if alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) || alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::ParamDomain("amplitudes must be positive and strictly increasing".into()));
    }
    if proportions.iter().any(|p| !(0.0..=1.0).contains(p)) || trials.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InputDomain("proportions must lie in [0,1] with positive trial counts".into()));
    }
    if !(criterion > 0.5 && criterion < 1.0) {
        return Err(Error::ParamDomain(format!("criterion must lie in (0.5, 1), got {criterion}")));
    }
    if proportions.iter().all(|p| *p < criterion) || proportions.iter().all(|p| *p >= criterion) {
        return Err(Error::NotBracketed(format!(
            "all proportions on one side of {criterion}; widen or shift the amplitude grid"
        )));
    }
    let u: Vec<f64> = alphas.iter().map(|a| family_axis(family, *a)).collect();
    let (u_lo, u_hi) = (u[0], u[n - 1]);
    let width = u_hi - u_lo;
    let nll = |m: f64, log_s: f64| -> f64 {
        let s = log_s.exp();
        let mut acc = 0.0;
        for i in 0..n {
            let p = family_prob(family, u[i], m, s).clamp(1e-15, 1.0 - 1e-15);
            let k = proportions[i];
            acc -= trials[i] * (k * p.ln() + (1.0 - k) * (1.0 - p).ln());
        }
        acc
    };
    let (ls_lo, ls_hi) = ((1e-4 * width).ln(), (10.0 * width).ln());
    let best_s = |m: f64| golden(|ls| nll(m, ls), ls_lo, ls_hi, GOLDEN_ITERS);
    let (m_lo, m_hi) = (u_lo - width, u_hi + width);
    let step = (m_hi - m_lo) / (M_GRID - 1) as f64;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..M_GRID {
        let m = m_lo + step * i as f64;
        let (ls, f) = best_s(m);
        if f < best.0 {
            best = (f, m, ls);
        }
    }
    // local refinement of the location
    let (m, _) = golden(|m| best_s(m).1, best.1 - step, best.1 + step, GOLDEN_ITERS);
    let (log_s, f) = best_s(m);
    let (m, log_s, f) = if f <= best.0 { (m, log_s, f) } else { (best.1, best.2, best.0) };
    let s = log_s.exp();
    let edge = |v: f64, lo: f64, hi: f64| (v - lo).abs() < 1e-6 * (hi - lo) || (hi - v).abs() < 1e-6 * (hi - lo);
    let threshold = match family {
        PsychometricFamily::LinearAlpha => m + s * std_normal_quantile(criterion),
        PsychometricFamily::LogAlpha => (m + s * std_normal_quantile(2.0 * criterion - 1.0)).exp(),
    };
    Ok(PsychometricFit {
        family,
        threshold,
        location: m,
        slope: s,
        log_likelihood: -f,
        converged: threshold > 0.0 && !edge(log_s, ls_lo, ls_hi) && !edge(m, m_lo, m_hi),
        lapse: 0.0,
    })
}

/// Trials per level: an even split with the remainder on the lowest levels.
pub fn split_trials(total: usize, levels: usize) -> Vec<usize> {
    (0..levels)
        .map(|i| total / levels + usize::from(i < total % levels))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdMeasurement {
    pub analytic: Threshold,
    /// Fitted threshold, or `Infinite` when censored at the amplitude cap.
    pub threshold: Threshold,
    pub censored: bool,
    pub fit: Option<PsychometricFit>,
    pub levels: Vec<f64>,
    pub trials: Vec<usize>,
    pub correct: Vec<usize>,
    pub seed: u64,
}

/// Method of constant stimuli on a log grid centered on the analytic
/// threshold (or on the amplitude cap when that is exceeded), then a fit.
pub fn measure_threshold(
    model: &ModelChain,
    x: &Grid2,
    e: &Grid2,
    cfg: &ObserverConfig,
) -> Result<ThresholdMeasurement> {
    let analytic = analytic_threshold(model, x, e, cfg)?;
    let capped = analytic.value() > cfg.max_amplitude;
    let center = if capped { cfg.max_amplitude } else { analytic.value() };
    let half = (cfg.levels - 1) as f64 / 2.0;
    let levels: Vec<f64> = (0..cfg.levels)
        .map(|i| center * cfg.grid_span.powf((i as f64 - half) / half))
        .collect();
    let trials = split_trials(cfg.trials_per_vector, cfg.levels);
    let correct = levels
        .iter()
        .zip(&trials)
        .enumerate()
        .map(|(i, (a, n))| correct_count(model, x, e, *a, cfg, *n, derive_seed(cfg.seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let props: Vec<f64> = correct.iter().zip(&trials).map(|(c, n)| *c as f64 / *n as f64).collect();
    let weights: Vec<f64> = trials.iter().map(|n| *n as f64).collect();
    let (threshold, censored, fit) =
        match fit_psychometric(&levels, &props, &weights, cfg.criterion, cfg.family) {
            // beyond the displayable range the estimate is only a lower bound
            Ok(f) if f.threshold > cfg.max_amplitude => (Threshold::Infinite, true, Some(f)),
            Ok(f) if f.converged && f.threshold > 0.0 => (Threshold::Finite(f.threshold), false, Some(f)),
            Ok(f) => {
                return Err(Error::NotConverged(format!(
                    "psychometric fit did not converge (threshold {}, slope {})",
                    f.threshold, f.slope
                )))
            }
            Err(Error::NotBracketed(_)) if capped && props.iter().all(|p| *p < cfg.criterion) => {
                (Threshold::Infinite, true, None)
            }
            Err(e) => return Err(e),
        };
    Ok(ThresholdMeasurement {
        analytic,
        threshold,
        censored,
        fit,
        levels,
        trials,
        correct,
        seed: cfg.seed,
    })
}

/// One image's extremal directions from the model under test.
#[derive(Debug, Clone)]
pub struct EigenPairImage {
    pub image: Grid2,
    pub e_max: Grid2,
    pub e_min: Grid2,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DEntry {
    pub subject: usize,
    pub image: usize,
    pub t_max: Threshold,
    pub t_min: Threshold,
    pub log_ratio: Option<LogRatio>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CensoredEntry {
    pub subject: usize,
    pub image: usize,
    pub direction: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DReport {
    /// Mean log threshold ratio over entries with a defined ratio; infinite
    /// when any `T(ê_l)` was censored.
    pub d: Option<LogRatio>,
    pub entries: Vec<DEntry>,
    pub censored: Vec<CensoredEntry>,
}

fn summarize(entries: Vec<DEntry>) -> DReport {
    let mut censored = Vec::new();
    for e in &entries {
        for (dir, t) in [("max", e.t_max), ("min", e.t_min)] {
            if !t.is_finite() {
                censored.push(CensoredEntry {
                    subject: e.subject,
                    image: e.image,
                    direction: dir,
                });
            }
        }
    }
    let defined: Vec<LogRatio> = entries.iter().filter_map(|e| e.log_ratio).collect();
    let d = if defined.is_empty() {
        None
    } else if defined.iter().any(|r| r.is_infinite()) {
        Some(LogRatio::Infinite)
    } else {
        Some(LogRatio::Finite(
            defined.iter().map(|r| r.value()).sum::<f64>() / defined.len() as f64,
        ))
    };
    DReport { d, entries, censored }
}

/// `D = mean_{s,i} ln(T_s(ê_l; x_i) / T_s(ê_m; x_i))` with thresholds
/// measured against `reference`. Subject `s`, image `i` and direction `k`
/// use `derive_seed(cfg.seed, [s, i, k])`.
pub fn empirical_d(
    pairs: &[EigenPairImage],
    reference: &ModelChain,
    cfg: &ObserverConfig,
    subjects: usize,
) -> Result<DReport> {
    if pairs.is_empty() || subjects == 0 {
        return Err(Error::ParamDomain("need at least one image and one subject".into()));
    }
    let mut entries = Vec::new();
    for s in 0..subjects {
        for (i, p) in pairs.iter().enumerate() {
            let at = |k: u64, e: &Grid2| {
                let c = ObserverConfig {
                    seed: derive_seed(cfg.seed, &[s as u64, i as u64, k]),
                    ..*cfg
                };
                measure_threshold(reference, &p.image, e, &c).map(|m| m.threshold)
            };
            let t_max = at(0, &p.e_max)?;
            let t_min = at(1, &p.e_min)?;
            entries.push(DEntry {
                subject: s,
                image: i,
                t_max,
                t_min,
                log_ratio: threshold_log_ratio(t_max, t_min),
            });
        }
    }
    Ok(summarize(entries))
}

/// `D` from exact analytic thresholds (no simulated subjects).
pub fn analytic_d(pairs: &[EigenPairImage], reference: &ModelChain, cfg: &ObserverConfig) -> Result<DReport> {
    if pairs.is_empty() {
        return Err(Error::ParamDomain("need at least one image".into()));
    }
    let entries = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t_max = analytic_threshold(reference, &p.image, &p.e_max, cfg)?;
            let t_min = analytic_threshold(reference, &p.image, &p.e_min, cfg)?;
            Ok(DEntry {
                subject: 0,
                image: i,
                t_max,
                t_min,
                log_ratio: threshold_log_ratio(t_max, t_min),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(entries))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportThresholds {
    pub max: Threshold,
    pub min: Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportFits {
    pub max: ThresholdMeasurement,
    pub min: ThresholdMeasurement,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSeeds {
    pub max: u64,
    pub min: u64,
}

/// Threshold experiment for one image and one model's eigen-distortions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub image_id: String,
    pub model_id: String,
    pub sigma: f64,
    pub thresholds: ReportThresholds,
    pub log_ratio: Option<LogRatio>,
    pub fits: ReportFits,
    pub seeds: ReportSeeds,
}

pub fn run_experiment(
    image_id: &str,
    model_id: &str,
    reference: &ModelChain,
    pair: &EigenPairImage,
    cfg: &ObserverConfig,
) -> Result<ExperimentReport> {
    let seeds = ReportSeeds {
        max: derive_seed(cfg.seed, &[0]),
        min: derive_seed(cfg.seed, &[1]),
    };
    let max = measure_threshold(reference, &pair.image, &pair.e_max, &ObserverConfig { seed: seeds.max, ..*cfg })?;
    let min = measure_threshold(reference, &pair.image, &pair.e_min, &ObserverConfig { seed: seeds.min, ..*cfg })?;
    Ok(ExperimentReport {
        image_id: image_id.to_string(),
        model_id: model_id.to_string(),
        sigma: cfg.sigma,
        thresholds: ReportThresholds {
            max: max.threshold,
            min: min.threshold,
        },
        log_ratio: threshold_log_ratio(max.threshold, min.threshold),
        fits: ReportFits { max, min },
        seeds,
    })
}
