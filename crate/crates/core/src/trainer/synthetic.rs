//! Synthetic rating datasets scored by a known model.

use crate::diffmodel::ModelChain;
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, filter_plane, gaussian_kernel, gaussian_noise2, Grid2, NormalStream};

use super::{perceptual_distance, DatasetRecord};

/// Scores are `SCORE_SLOPE · D_true + SCORE_OFFSET + noise`.
pub const SCORE_SLOPE: f64 = 5.0;
pub const SCORE_OFFSET: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreNoise {
    /// Standard deviation in score units.
    Absolute(f64),
    /// Standard deviation as a fraction of `SCORE_SLOPE · std(D_true)`.
    RelativeToDistanceStd(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub n_records: usize,
    pub noise: ScoreNoise,
    pub seed: u64,
}

/// One of four distortion families, picked per record.
fn distort(x: &Grid2, kind: usize, amp: f64, seed: u64) -> Grid2 {
    let (h, w) = x.dims();
    let out = match kind {
        0 => x.add_scaled(amp, &gaussian_noise2(seed, h, w)),
        1 => {
            let n = gaussian_noise2(seed, h, w);
            let k = gaussian_kernel(1.5).expect("positive sigma");
            let blurred = Grid2::from_vec(h, w, filter_plane(n.data(), h, w, &k)).expect("dims");
            // same RMS as the white-noise family
            let rms = blurred.norm() / ((h * w) as f64).sqrt();
            x.add_scaled(if rms > 0.0 { amp / rms } else { 0.0 }, &blurred)
        }
        2 => {
            let mean = x.data().iter().sum::<f64>() / x.len() as f64;
            let c = if seed % 2 == 0 { 1.0 + 4.0 * amp } else { 1.0 - 4.0 * amp };
            x.map(|v| mean + c * (v - mean))
        }
        _ => {
            let d = if seed % 2 == 0 { 2.0 * amp } else { -2.0 * amp };
            x.map(|v| v + d)
        }
    };
    out.map(|v| v.clamp(0.0, 1.0))
}

/// Perturb base images with seeded distortions of random type and log-uniform
/// amplitude in `[0.01, 0.1]`, score them with `model`, add Gaussian score noise.
pub fn generate_synthetic_dataset(
    model: &ModelChain,
    base_images: &[Grid2],
    cfg: &SyntheticConfig,
) -> Result<Vec<DatasetRecord>> {
    if base_images.is_empty() {
        return Err(Error::ParamDomain("no base images".into()));
    }
    let sigma = match cfg.noise {
        ScoreNoise::Absolute(s) | ScoreNoise::RelativeToDistanceStd(s) => s,
    };
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::ParamDomain(format!("score noise must be >= 0, got {sigma}")));
    }
    let mut rng = NormalStream::new(derive_seed(cfg.seed, &[0]));
    let mut pairs = Vec::with_capacity(cfg.n_records);
    for i in 0..cfg.n_records {
        let base = &base_images[rng.below(base_images.len())];
        let kind = rng.below(4);
        let amp = 0.01 * 10f64.powf(rng.uniform());
        let x2 = distort(base, kind, amp, derive_seed(cfg.seed, &[1, i as u64]));
        pairs.push((base.clone(), x2));
    }
    let d: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| perceptual_distance(model, a, b))
        .collect::<Result<_>>()?;
    let sd = match cfg.noise {
        ScoreNoise::Absolute(s) => s,
        ScoreNoise::RelativeToDistanceStd(f) => {
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            f * SCORE_SLOPE * var.sqrt()
        }
    };
    let mut noise = NormalStream::new(derive_seed(cfg.seed, &[2]));
    Ok(pairs
        .into_iter()
        .zip(d)
        .map(|((reference, distorted), di)| DatasetRecord {
            reference,
            distorted,
            score: SCORE_SLOPE * di + SCORE_OFFSET + sd * noise.next_normal(),
        })
        .collect())
}
