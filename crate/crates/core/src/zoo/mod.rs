//! Perceptual models: the identity (MSE) baseline, the LGN family
//! (LN, LG, LGG, On-Off) and a four-layer convolutional network.
//!
//! Every model is a [`ModelChain`]. Trainable models are described by a
//! [`ModelSpec`]: a kind plus an unconstrained vector `theta`, mapped to valid
//! parameters through a [`ParamTransform`].
//!
//! The LGN cascade for one channel, with `*` a mirror-boundary convolution
//! and `⊘` elementwise division:
//!
//! ```text
//! v = DoG * x
//! w = v ⊘ (1 + a_L (G_L * x))                    luminance gain
//! z = w ⊘ (1 + a_C sqrt(G_C * w² + 1e-8))        contrast gain
//! y = softplus(z)
//! ```
//!
//! LN skips both gain stages, LG skips the contrast stage. On-Off runs two
//! independent LGG channels whose DoG filters have opposite sign.

pub mod params;
pub mod stages;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffmodel::{ModelChain, Stage};
use crate::error::{Error, Result};
use crate::tensor::{KernelBank, NormalStream};

pub use params::{ParamTransform, Slot};
use stages::{ContrastGain, ConvLayer, DogStage, LuminanceGain, Softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mse,
    Ln,
    Lg,
    Lgg,
    #[serde(rename = "onoff")]
    OnOff,
    Cnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Mse,
        ModelKind::Ln,
        ModelKind::Lg,
        ModelKind::Lgg,
        ModelKind::OnOff,
        ModelKind::Cnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mse => "mse",
            ModelKind::Ln => "ln",
            ModelKind::Lg => "lg",
            ModelKind::Lgg => "lgg",
            ModelKind::OnOff => "onoff",
            ModelKind::Cnn => "cnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase().replace('-', ""))
            .ok_or_else(|| Error::ParamDomain(format!("unknown model type {s:?}")))
    }

    /// Number of LGN parameters per channel used by this kind.
    fn lgn_width(self) -> Option<usize> {
        match self {
            ModelKind::Ln => Some(2),
            ModelKind::Lg => Some(4),
            ModelKind::Lgg | ModelKind::OnOff => Some(6),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of one LGN channel. LN reads the DoG scales only, LG adds the
/// luminance pair, LGG and each On-Off channel use all six.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgnChannel {
    pub sigma_center: f64,
    pub sigma_surround: f64,
    pub lum_amplitude: f64,
    pub lum_sigma: f64,
    pub con_amplitude: f64,
    pub con_sigma: f64,
}

impl Default for LgnChannel {
    fn default() -> Self {
        Self {
            sigma_center: 0.6,
            sigma_surround: 1.8,
            lum_amplitude: 1.5,
            lum_sigma: 1.6,
            con_amplitude: 4.0,
            con_sigma: 1.2,
        }
    }
}

impl LgnChannel {
    fn validate(&self, width: usize) -> Result<()> {
        let scales = [
            ("sigma_center", self.sigma_center),
            ("sigma_surround", self.sigma_surround),
            ("lum_sigma", self.lum_sigma),
            ("con_sigma", self.con_sigma),
        ];
        let amps = [
            ("lum_amplitude", self.lum_amplitude),
            ("con_amplitude", self.con_amplitude),
        ];
        let used_scales = match width {
            2 => 2,
            4 => 3,
            _ => 4,
        };
        for (name, v) in &scales[..used_scales] {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::ParamDomain(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in &amps[..(width - 2) / 2] {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::ParamDomain(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.sigma_center >= self.sigma_surround {
            return Err(Error::ParamDomain(format!(
                "sigma_center ({}) must be below sigma_surround ({})",
                self.sigma_center, self.sigma_surround
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnOffParams {
    pub on: LgnChannel,
    pub off: LgnChannel,
}

impl OnOffParams {
    pub fn symmetric(channel: LgnChannel) -> Self {
        Self {
            on: channel,
            off: channel,
        }
    }
}

impl Default for OnOffParams {
    /// Distinct channels. With identical luminance amplitudes both channels
    /// share the null direction `x + 1/a_L` and the Fisher matrix is singular.
    /// No scale sits where `4 sigma` is an integer, so the truncation radius
    /// is locally constant.
    fn default() -> Self {
        Self {
            on: LgnChannel::default(),
            off: LgnChannel {
                sigma_center: 0.8,
                sigma_surround: 2.2,
                lum_amplitude: 0.7,
                lum_sigma: 2.2,
                con_amplitude: 2.5,
                con_sigma: 1.4,
            },
        }
    }
}

pub const TRAINABLE_ONOFF_PARAMS: usize = 12;

fn lgn_chain(
    height: usize,
    width: usize,
    channels: &[(LgnChannel, f64)],
    depth: usize,
) -> Result<ModelChain> {
    for (c, _) in channels {
        c.validate(depth)?;
    }
    let dogs: Vec<(f64, f64, f64)> = channels
        .iter()
        .map(|(c, sign)| (c.sigma_center, c.sigma_surround, *sign))
        .collect();
    let mut stages: Vec<Arc<dyn Stage>> = vec![Arc::new(DogStage::new(&dogs, depth >= 4)?)];
    if depth >= 4 {
        let lum: Vec<(f64, f64)> = channels
            .iter()
            .map(|(c, _)| (c.lum_amplitude, c.lum_sigma))
            .collect();
        stages.push(Arc::new(LuminanceGain::new(&lum)?));
    }
    if depth >= 6 {
        let con: Vec<(f64, f64)> = channels
            .iter()
            .map(|(c, _)| (c.con_amplitude, c.con_sigma))
            .collect();
        stages.push(Arc::new(ContrastGain::new(&con)?));
    }
    stages.push(Arc::new(Softplus));
    ModelChain::new(height, width, stages)
}

/// Identity model: the response is the image itself.
pub fn mse_model(height: usize, width: usize) -> ModelChain {
    ModelChain::identity(height, width)
}

/// `softplus(DoG * x)`
pub fn ln_model(params: &LgnChannel, height: usize, width: usize) -> Result<ModelChain> {
    lgn_chain(height, width, &[(*params, 1.0)], 2)
}

/// DoG followed by luminance gain control and softplus.
pub fn lg_model(params: &LgnChannel, height: usize, width: usize) -> Result<ModelChain> {
    lgn_chain(height, width, &[(*params, 1.0)], 4)
}

/// DoG, luminance gain, contrast gain, softplus.
pub fn lgg_model(params: &LgnChannel, height: usize, width: usize) -> Result<ModelChain> {
    lgn_chain(height, width, &[(*params, 1.0)], 6)
}

/// Two LGG channels (On, Off) with opposite-sign DoG filters; output has two channels.
pub fn onoff_model(params: &OnOffParams, height: usize, width: usize) -> Result<ModelChain> {
    lgn_chain(height, width, &[(params.on, 1.0), (params.off, -1.0)], 6)
}

/// Channel counts through the network: one input plane, ×4 at every stride-2 layer.
pub const CNN_CHANNELS: [usize; 5] = [1, 4, 16, 64, 256];
pub const CNN_KERNEL: usize = 5;
pub const CNN_STRIDE: usize = 2;
pub const CNN_MIN_INPUT: usize = 16;

/// Convolution weights in the network: 25 · (1·4 + 4·16 + 16·64 + 64·256).
pub const CNN_CONV_WEIGHTS: usize = 436_900;

/// Parameter count quoted for the reference network. The 8 extra scalars are
/// accounted for as the frozen normalization statistics (a mean and a
/// variance for each of the 4 layers); they are not trained here, and the
/// network has no bias terms.
pub const CNN_REPORTED_PARAMS: usize = 436_908;
pub const CNN_FROZEN_STATS_PER_LAYER: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    pub layers: Vec<KernelBank>,
    pub divisors: Vec<f64>,
}

impl CnnParams {
    pub fn zeros() -> Self {
        let layers = CNN_CHANNELS
            .windows(2)
            .map(|w| KernelBank::zeros(w[1], w[0], CNN_KERNEL))
            .collect();
        Self {
            layers,
            divisors: vec![1.0; 4],
        }
    }

    /// Weights drawn from `N(0, (gain / sqrt(fan_in))²)`, divisors 1.
    pub fn random(seed: u64, gain: f64) -> Self {
        let mut p = Self::zeros();
        let mut rng = NormalStream::new(seed);
        for bank in &mut p.layers {
            let fan_in = (bank.in_channels * bank.size * bank.size) as f64;
            let std = gain / fan_in.sqrt();
            for w in &mut bank.weights {
                *w = std * rng.next_normal();
            }
        }
        p
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|b| b.weights.len()).sum()
    }

    pub fn from_flat(weights: &[f64], divisors: Vec<f64>) -> Result<Self> {
        if weights.len() != CNN_CONV_WEIGHTS {
            return Err(Error::Shape(format!(
                "CNN needs {CNN_CONV_WEIGHTS} weights, got {}",
                weights.len()
            )));
        }
        let mut p = Self::zeros();
        let mut off = 0;
        for bank in &mut p.layers {
            let n = bank.weights.len();
            bank.weights.copy_from_slice(&weights[off..off + n]);
            off += n;
        }
        p.divisors = divisors;
        p.validate()?;
        Ok(p)
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|b| b.weights.iter().copied())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.layers.len() != 4 || self.divisors.len() != 4 {
            return Err(Error::ParamDomain(
                "CNN needs 4 layers and 4 normalization divisors".into(),
            ));
        }
        for (i, (bank, w)) in self.layers.iter().zip(CNN_CHANNELS.windows(2)).enumerate() {
            if bank.in_channels != w[0] || bank.out_channels != w[1] || bank.size != CNN_KERNEL {
                return Err(Error::Shape(format!(
                    "layer {i} must be {}x{}x{CNN_KERNEL}x{CNN_KERNEL}",
                    w[1], w[0]
                )));
            }
        }
        if let Some(d) = self.divisors.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::ParamDomain(format!(
                "normalization divisor must be positive, got {d}"
            )));
        }
        Ok(())
    }

    /// Set every divisor to the standard deviation of that layer's convolution
    /// output, pooled over all images, channels and positions. Layers are
    /// calibrated in order so each sees the already-normalized input.
    pub fn calibrate_divisors(&mut self, images: &[crate::tensor::Grid2]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::ParamDomain("no images to calibrate on".into()));
        }
        let mut acts: Vec<crate::tensor::Grid3> = images.iter().map(|x| x.to_grid3()).collect();
        for l in 0..self.layers.len() {
            let layer = ConvLayer::new(self.layers[l].clone(), CNN_STRIDE, 1.0)?;
            let raws: Vec<_> = acts.iter().map(|a| layer.raw(a)).collect();
            let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
            for r in &raws {
                for v in r.data() {
                    n += 1;
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            self.divisors[l] = if std > 1e-12 { std } else { 1.0 };
            acts = raws
                .into_iter()
                .map(|r| r.scaled(1.0 / self.divisors[l]).map(stages::softplus))
                .collect();
        }
        Ok(())
    }
}

/// Four × (5×5 stride-2 convolution, frozen divisor, softplus).
pub fn cnn_model(params: &CnnParams, height: usize, width: usize) -> Result<ModelChain> {
    params.validate()?;
    if height < CNN_MIN_INPUT || width < CNN_MIN_INPUT {
        return Err(Error::Shape(format!(
            "CNN needs at least {CNN_MIN_INPUT}x{CNN_MIN_INPUT} input, got {height}x{width}"
        )));
    }
    let mut stages: Vec<Arc<dyn Stage>> = Vec::with_capacity(8);
    for (bank, d) in params.layers.iter().zip(&params.divisors) {
        stages.push(Arc::new(ConvLayer::new(bank.clone(), CNN_STRIDE, *d)?));
        stages.push(Arc::new(Softplus));
    }
    ModelChain::new(height, width, stages)
}

/// A model kind together with its trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Unconstrained trainable parameters.
    pub theta: Vec<f64>,
    /// Frozen CNN normalization divisors; empty for other kinds.
    pub bn_divisors: Vec<f64>,
}

impl ModelSpec {
    pub fn mse() -> Self {
        Self {
            kind: ModelKind::Mse,
            theta: Vec::new(),
            bn_divisors: Vec::new(),
        }
    }

    pub fn ln(c: &LgnChannel) -> Result<Self> {
        Self::from_lgn(ModelKind::Ln, &[*c])
    }

    pub fn lg(c: &LgnChannel) -> Result<Self> {
        Self::from_lgn(ModelKind::Lg, &[*c])
    }

    pub fn lgg(c: &LgnChannel) -> Result<Self> {
        Self::from_lgn(ModelKind::Lgg, &[*c])
    }

    pub fn onoff(p: &OnOffParams) -> Result<Self> {
        Self::from_lgn(ModelKind::OnOff, &[p.on, p.off])
    }

    pub fn cnn(p: &CnnParams) -> Result<Self> {
        p.validate()?;
        Ok(Self {
            kind: ModelKind::Cnn,
            theta: p.flat_weights(),
            bn_divisors: p.divisors.clone(),
        })
    }

    /// Default parameters for a kind: fixed LGN settings, or a seeded random CNN.
    pub fn default_for(kind: ModelKind, seed: u64) -> Result<Self> {
        let c = LgnChannel::default();
        match kind {
            ModelKind::Mse => Ok(Self::mse()),
            ModelKind::Ln => Self::ln(&c),
            ModelKind::Lg => Self::lg(&c),
            ModelKind::Lgg => Self::lgg(&c),
            ModelKind::OnOff => Self::onoff(&OnOffParams::default()),
            ModelKind::Cnn => Self::cnn(&CnnParams::random(seed, 1.0)),
        }
    }

    fn from_lgn(kind: ModelKind, channels: &[LgnChannel]) -> Result<Self> {
        let width = kind.lgn_width().expect("LGN kind");
        for c in channels {
            c.validate(width)?;
        }
        let p = lgn_to_constrained(kind, channels);
        let theta = Self::transform_for(kind, p.len()).unconstrain(&p)?;
        Ok(Self {
            kind,
            theta,
            bn_divisors: Vec::new(),
        })
    }

    fn transform_for(kind: ModelKind, n: usize) -> ParamTransform {
        match kind {
            ModelKind::Mse => ParamTransform::free(0),
            ModelKind::Cnn => ParamTransform::free(n),
            _ => {
                let channels = if kind == ModelKind::OnOff { 2 } else { 1 };
                let width = kind.lgn_width().expect("LGN kind");
                let mut slots = Vec::with_capacity(channels * width);
                // DoG scales for all channels, then luminance pairs, then contrast pairs
                for c in 0..channels {
                    slots.push(Slot::Positive);
                    slots.push(Slot::Above(2 * c));
                }
                for _ in 1..width / 2 {
                    for _ in 0..channels {
                        slots.push(Slot::Positive);
                        slots.push(Slot::Positive);
                    }
                }
                ParamTransform::new(slots)
            }
        }
    }

    pub fn transform(&self) -> ParamTransform {
        Self::transform_for(self.kind, self.theta.len())
    }

    pub fn constrained(&self) -> Result<Vec<f64>> {
        self.transform().constrain(&self.theta)
    }

    /// LGN channels for LGN kinds.
    pub fn lgn_channels(&self) -> Result<Vec<LgnChannel>> {
        lgn_from_constrained(self.kind, &self.constrained()?)
    }

    pub fn cnn_params(&self) -> Result<CnnParams> {
        CnnParams::from_flat(&self.theta, self.bn_divisors.clone())
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        Self {
            kind: self.kind,
            theta,
            bn_divisors: self.bn_divisors.clone(),
        }
    }

    pub fn build(&self, height: usize, width: usize) -> Result<ModelChain> {
        let expected = match self.kind {
            ModelKind::Mse => 0,
            ModelKind::Cnn => CNN_CONV_WEIGHTS,
            ModelKind::OnOff => TRAINABLE_ONOFF_PARAMS,
            k => k.lgn_width().expect("LGN kind"),
        };
        if self.theta.len() != expected {
            return Err(Error::Shape(format!(
                "{} model needs {expected} parameters, got {}",
                self.kind,
                self.theta.len()
            )));
        }
        match self.kind {
            ModelKind::Mse => Ok(mse_model(height, width)),
            ModelKind::Cnn => cnn_model(&self.cnn_params()?, height, width),
            ModelKind::OnOff => {
                let ch = self.lgn_channels()?;
                onoff_model(
                    &OnOffParams {
                        on: ch[0],
                        off: ch[1],
                    },
                    height,
                    width,
                )
            }
            ModelKind::Ln => ln_model(&self.lgn_channels()?[0], height, width),
            ModelKind::Lg => lg_model(&self.lgn_channels()?[0], height, width),
            ModelKind::Lgg => lgg_model(&self.lgn_channels()?[0], height, width),
        }
    }
}

/// Flatten channels into the chain's parameter order: DoG scales of every
/// channel, then luminance pairs, then contrast pairs.
fn lgn_to_constrained(kind: ModelKind, channels: &[LgnChannel]) -> Vec<f64> {
    let width = kind.lgn_width().expect("LGN kind");
    let mut p = Vec::with_capacity(width * channels.len());
    for c in channels {
        p.extend([c.sigma_center, c.sigma_surround]);
    }
    if width >= 4 {
        for c in channels {
            p.extend([c.lum_amplitude, c.lum_sigma]);
        }
    }
    if width >= 6 {
        for c in channels {
            p.extend([c.con_amplitude, c.con_sigma]);
        }
    }
    p
}

fn lgn_from_constrained(kind: ModelKind, p: &[f64]) -> Result<Vec<LgnChannel>> {
    let width = kind
        .lgn_width()
        .ok_or_else(|| Error::ParamDomain(format!("{kind} is not an LGN model")))?;
    let n = if kind == ModelKind::OnOff { 2 } else { 1 };
    if p.len() != n * width {
        return Err(Error::Shape(format!(
            "{kind} needs {} parameters, got {}",
            n * width,
            p.len()
        )));
    }
    let defaults = LgnChannel::default();
    Ok((0..n)
        .map(|c| {
            let mut ch = LgnChannel {
                sigma_center: p[2 * c],
                sigma_surround: p[2 * c + 1],
                ..defaults
            };
            if width >= 4 {
                ch.lum_amplitude = p[2 * n + 2 * c];
                ch.lum_sigma = p[2 * n + 2 * c + 1];
            } else {
                ch.lum_amplitude = 0.0;
            }
            if width >= 6 {
                ch.con_amplitude = p[4 * n + 2 * c];
                ch.con_sigma = p[4 * n + 2 * c + 1];
            } else {
                ch.con_amplitude = 0.0;
            }
            ch
        })
        .collect())
}

#[cfg(test)]
mod tests;
