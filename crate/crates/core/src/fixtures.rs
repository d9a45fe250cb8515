//! Seeded synthetic images used by tests, examples and the CLI `synth` default.

use crate::tensor::{filter_plane, gaussian_kernel, gaussian_noise2, Grid2};

/// Smooth natural-looking luminance image in `[0.05, 0.95]`: white noise
/// blurred at `sigma = 1.2`, rescaled to mean 0.5 and standard deviation 0.15.
pub fn fixture_image(seed: u64, height: usize, width: usize) -> Grid2 {
    let noise = gaussian_noise2(seed, height, width);
    let kernel = gaussian_kernel(1.2).expect("positive sigma");
    let blurred = filter_plane(noise.data(), height, width, &kernel);
    let n = blurred.len() as f64;
    let mean = blurred.iter().sum::<f64>() / n;
    let var = blurred.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { 0.15 / var.sqrt() } else { 0.0 };
    let data = blurred
        .iter()
        .map(|v| (0.5 + scale * (v - mean)).clamp(0.05, 0.95))
        .collect();
    Grid2::from_vec(height, width, data).expect("consistent dims")
}
