//! Dense grids, mirror-boundary convolution, Gaussian/DoG kernels and seeded noise.
//!
//! Everything here runs in double precision with a fixed summation order so
//! that repeated calls are bit-identical.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn plane(height: usize, width: usize) -> Self {
        Self::new(1, height, width)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Single-plane luminance image or 2-D filter, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn same_dims(&self, other: &Grid2) -> bool {
        self.dims() == other.dims()
    }

    pub fn into_grid3(self) -> Grid3 {
        Grid3 {
            shape: Shape::plane(self.height, self.width),
            data: self.data,
        }
    }

    pub fn to_grid3(&self) -> Grid3 {
        self.clone().into_grid3()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid2 {
        Grid2 {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, alpha: f64, other: &Grid2) -> Grid2 {
        let mut out = self.clone();
        axpy(alpha, &other.data, &mut out.data);
        out
    }

    pub fn scaled(&self, alpha: f64) -> Grid2 {
        let mut out = self.clone();
        scale(alpha, &mut out.data);
        out
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn dot(&self, other: &Grid2) -> f64 {
        dot(&self.data, &other.data)
    }
}

/// Multi-channel response, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    shape: Shape,
    data: Vec<f64>,
}

impl Grid3 {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "grid {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Stack equally sized planes into channels.
    pub fn from_planes(height: usize, width: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        let channels = planes.len();
        let mut data = Vec::with_capacity(channels * height * width);
        for p in planes {
            if p.len() != height * width {
                return Err(Error::Shape(format!(
                    "plane of length {} in a {height}x{width} stack",
                    p.len()
                )));
            }
            data.extend_from_slice(&p);
        }
        Ok(Self {
            shape: Shape::new(channels, height, width),
            data,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret a single-channel grid as an image.
    pub fn into_grid2(self) -> Result<Grid2> {
        if self.shape.channels != 1 {
            return Err(Error::Shape(format!(
                "expected one channel, got {}",
                self.shape.channels
            )));
        }
        Ok(Grid2 {
            height: self.shape.height,
            width: self.shape.width,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid3 {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_scaled(&self, alpha: f64, other: &Grid3) -> Grid3 {
        let mut out = self.clone();
        axpy(alpha, &other.data, &mut out.data);
        out
    }

    pub fn scaled(&self, alpha: f64) -> Grid3 {
        let mut out = self.clone();
        scale(alpha, &mut out.data);
        out
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn dot(&self, other: &Grid3) -> f64 {
        dot(&self.data, &other.data)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn scale(alpha: f64, v: &mut [f64]) {
    for x in v {
        *x *= alpha;
    }
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Scale `v` to unit length in place and return its original norm.
/// A zero vector is left untouched.
pub fn normalize(v: &mut [f64]) -> f64 {
    let n = l2_norm(v);
    if n > 0.0 {
        scale(1.0 / n, v);
    }
    n
}

/// Odd-sized 2-D filter whose origin is its geometric center.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    taps: Grid2,
}

impl KernelSpec {
    pub fn new(taps: Grid2) -> Result<Self> {
        if taps.height() % 2 == 0 || taps.width() % 2 == 0 {
            return Err(Error::Shape(format!(
                "kernel must have odd dims, got {}x{}",
                taps.height(),
                taps.width()
            )));
        }
        Ok(Self { taps })
    }

    pub fn taps(&self) -> &Grid2 {
        &self.taps
    }

    pub fn origin(&self) -> (usize, usize) {
        (self.taps.height() / 2, self.taps.width() / 2)
    }

    pub fn radius(&self) -> usize {
        self.taps.height() / 2
    }

    pub fn center(&self) -> f64 {
        let (r, c) = self.origin();
        self.taps.get(r, c)
    }

    pub fn sum(&self) -> f64 {
        self.taps.data().iter().sum()
    }

    /// Zero-pad to a larger odd radius, keeping the origin centered.
    pub fn padded(&self, radius: usize) -> KernelSpec {
        let own = self.radius();
        assert!(radius >= own, "cannot pad radius {own} down to {radius}");
        let size = 2 * radius + 1;
        let off = radius - own;
        let mut taps = Grid2::zeros(size, size);
        for i in 0..self.taps.height() {
            for j in 0..self.taps.width() {
                taps.set(i + off, j + off, self.taps.get(i, j));
            }
        }
        KernelSpec { taps }
    }

    pub fn negated(&self) -> KernelSpec {
        KernelSpec {
            taps: self.taps.scaled(-1.0),
        }
    }
}

fn check_sigma(sigma: f64, what: &str) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::ParamDomain(format!(
            "{what} must be positive and finite, got {sigma}"
        )));
    }
    Ok(())
}

pub fn gaussian_radius(sigma: f64) -> usize {
    (4.0 * sigma).ceil() as usize
}

/// Isotropic Gaussian truncated at radius `ceil(4 sigma)` and renormalized to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Result<KernelSpec> {
    Ok(gaussian_with_derivative(sigma)?.0)
}

/// Gaussian kernel together with the elementwise derivative of its taps with
/// respect to `sigma` (normalization included, truncation radius held fixed).
pub fn gaussian_with_derivative(sigma: f64) -> Result<(KernelSpec, KernelSpec)> {
    check_sigma(sigma, "sigma")?;
    let r = gaussian_radius(sigma) as isize;
    let size = (2 * r + 1) as usize;
    let s2 = sigma * sigma;
    let mut raw = Vec::with_capacity(size * size);
    let mut rr = Vec::with_capacity(size * size);
    for i in -r..=r {
        for j in -r..=r {
            let d2 = (i * i + j * j) as f64;
            raw.push((-d2 / (2.0 * s2)).exp());
            rr.push(d2);
        }
    }
    let z: f64 = raw.iter().sum();
    let taps: Vec<f64> = raw.iter().map(|g| g / z).collect();
    // d/ds [g/Z] = k * (r^2 - E_k[r^2]) / s^3
    let mean_r2 = dot(&taps, &rr);
    let s3 = s2 * sigma;
    let dtaps: Vec<f64> = taps
        .iter()
        .zip(&rr)
        .map(|(k, d2)| k * (d2 - mean_r2) / s3)
        .collect();
    Ok((
        KernelSpec {
            taps: Grid2::from_vec(size, size, taps)?,
        },
        KernelSpec {
            taps: Grid2::from_vec(size, size, dtaps)?,
        },
    ))
}

/// Center Gaussian minus surround Gaussian, both unit-sum, on the surround's support.
pub fn dog_kernel(sigma_center: f64, sigma_surround: f64) -> Result<KernelSpec> {
    check_sigma(sigma_center, "sigma_center")?;
    check_sigma(sigma_surround, "sigma_surround")?;
    if sigma_center >= sigma_surround {
        return Err(Error::ParamDomain(format!(
            "sigma_center ({sigma_center}) must be smaller than sigma_surround ({sigma_surround})"
        )));
    }
    let center = gaussian_kernel(sigma_center)?;
    let surround = gaussian_kernel(sigma_surround)?;
    let center = center.padded(surround.radius());
    let data = center
        .taps
        .data()
        .iter()
        .zip(surround.taps.data())
        .map(|(c, s)| c - s)
        .collect();
    let size = surround.taps.height();
    KernelSpec::new(Grid2::from_vec(size, size, data)?)
}

/// Reflect an index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`). Applied periodically, so any offset is valid.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn output_extent(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

/// Dense bank of equally sized kernels, indexed `[out][in][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub out_channels: usize,
    pub in_channels: usize,
    pub size: usize,
    pub weights: Vec<f64>,
}

impl KernelBank {
    pub fn zeros(out_channels: usize, in_channels: usize, size: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            size,
            weights: vec![0.0; out_channels * in_channels * size * size],
        }
    }

    pub fn from_vec(
        out_channels: usize,
        in_channels: usize,
        size: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Shape(format!("kernel size {size} is not odd")));
        }
        if weights.len() != out_channels * in_channels * size * size {
            return Err(Error::Shape(format!(
                "bank {out_channels}x{in_channels}x{size}x{size} needs {} weights, got {}",
                out_channels * in_channels * size * size,
                weights.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            size,
            weights,
        })
    }

    /// Build from one kernel per (out, in) pair; `None` entries are zero.
    pub fn from_specs(specs: &[Vec<Option<KernelSpec>>]) -> Result<Self> {
        let out_channels = specs.len();
        let in_channels = specs.first().map_or(0, Vec::len);
        let radius = specs
            .iter()
            .flatten()
            .flatten()
            .map(KernelSpec::radius)
            .max()
            .unwrap_or(0);
        let size = 2 * radius + 1;
        let mut bank = KernelBank::zeros(out_channels, in_channels, size);
        for (o, row) in specs.iter().enumerate() {
            if row.len() != in_channels {
                return Err(Error::Shape("ragged kernel set".into()));
            }
            for (c, k) in row.iter().enumerate() {
                if let Some(k) = k {
                    let k = k.padded(radius);
                    bank.kernel_mut(o, c).copy_from_slice(k.taps.data());
                }
            }
        }
        Ok(bank)
    }

    pub fn single(kernel: &KernelSpec) -> Self {
        let size = kernel.taps.height();
        Self {
            out_channels: 1,
            in_channels: 1,
            size,
            weights: kernel.taps.data().to_vec(),
        }
    }

    pub fn kernel(&self, o: usize, c: usize) -> &[f64] {
        let n = self.size * self.size;
        let start = (o * self.in_channels + c) * n;
        &self.weights[start..start + n]
    }

    pub fn kernel_mut(&mut self, o: usize, c: usize) -> &mut [f64] {
        let n = self.size * self.size;
        let start = (o * self.in_channels + c) * n;
        &mut self.weights[start..start + n]
    }

    pub fn output_shape(&self, input: Shape, stride: usize) -> Shape {
        Shape::new(
            self.out_channels,
            output_extent(input.height, stride),
            output_extent(input.width, stride),
        )
    }
}

/// Precomputed mirror-boundary gather offsets for one plane geometry: for
/// each output pixel, the flat input index under every kernel tap.
struct Taps {
    offsets: Vec<usize>,
    taps: usize,
}

impl Taps {
    fn new(in_h: usize, in_w: usize, size: usize, stride: usize) -> Self {
        let r = (size / 2) as isize;
        let out_h = output_extent(in_h, stride);
        let out_w = output_extent(in_w, stride);
        let mut offsets = Vec::with_capacity(out_h * out_w * size * size);
        for i in 0..out_h {
            for j in 0..out_w {
                for a in 0..size {
                    let row = reflect((i * stride) as isize + a as isize - r, in_h);
                    for b in 0..size {
                        offsets.push(row * in_w + reflect((j * stride) as isize + b as isize - r, in_w));
                    }
                }
            }
        }
        Self {
            offsets,
            taps: size * size,
        }
    }

    /// `out += correlate(input, kernel)`
    fn correlate(&self, input: &[f64], kernel: &[f64], out: &mut [f64]) {
        for (o, offs) in out.iter_mut().zip(self.offsets.chunks_exact(self.taps)) {
            let mut acc = 0.0;
            for (kv, &idx) in kernel.iter().zip(offs) {
                acc += kv * input[idx];
            }
            *o += acc;
        }
    }

    /// `grad_in += correlateᵀ(upstream, kernel)`
    fn correlate_adjoint(&self, upstream: &[f64], kernel: &[f64], grad_in: &mut [f64]) {
        for (&u, offs) in upstream.iter().zip(self.offsets.chunks_exact(self.taps)) {
            if u == 0.0 {
                continue;
            }
            for (kv, &idx) in kernel.iter().zip(offs) {
                grad_in[idx] += kv * u;
            }
        }
    }

    /// `grad_k += d<upstream, correlate(input, k)>/dk`
    fn kernel_grad(&self, input: &[f64], upstream: &[f64], grad_k: &mut [f64]) {
        for (&u, offs) in upstream.iter().zip(self.offsets.chunks_exact(self.taps)) {
            if u == 0.0 {
                continue;
            }
            for (g, &idx) in grad_k.iter_mut().zip(offs) {
                *g += u * input[idx];
            }
        }
    }
}

fn check_bank(input: Shape, bank: &KernelBank, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::ParamDomain("stride must be at least 1".into()));
    }
    if bank.in_channels != input.channels {
        return Err(Error::Shape(format!(
            "kernel bank expects {} input channels, input has {}",
            bank.in_channels, input.channels
        )));
    }
    Ok(())
}

/// Multi-channel strided cross-correlation with mirror boundaries.
///
/// `out[o, i, j] = sum_c sum_a sum_b k[o, c, a, b] * x[c, m(i*s + a - r), m(j*s + b - r)]`
/// where `m` reflects without repeating the edge. Kernels are not flipped, so
/// symmetric kernels behave as convolution.
pub fn conv2d(input: &Grid3, bank: &KernelBank, stride: usize) -> Result<Grid3> {
    check_bank(input.shape(), bank, stride)?;
    let taps = Taps::new(input.height(), input.width(), bank.size, stride);
    let mut out = Grid3::zeros(bank.output_shape(input.shape(), stride));
    for o in 0..bank.out_channels {
        let dst = out.plane_mut(o);
        for c in 0..bank.in_channels {
            taps.correlate(input.plane(c), bank.kernel(o, c), dst);
        }
    }
    Ok(out)
}

/// Transpose of [`conv2d`] with respect to its input.
pub fn conv2d_adjoint(
    upstream: &Grid3,
    bank: &KernelBank,
    stride: usize,
    input_shape: Shape,
) -> Result<Grid3> {
    check_bank(input_shape, bank, stride)?;
    let expected = bank.output_shape(input_shape, stride);
    if upstream.shape() != expected {
        return Err(Error::Shape(format!(
            "adjoint expects upstream {expected}, got {}",
            upstream.shape()
        )));
    }
    let taps = Taps::new(input_shape.height, input_shape.width, bank.size, stride);
    let mut grad = Grid3::zeros(input_shape);
    for c in 0..bank.in_channels {
        let dst = grad.plane_mut(c);
        for o in 0..bank.out_channels {
            taps.correlate_adjoint(upstream.plane(o), bank.kernel(o, c), dst);
        }
    }
    Ok(grad)
}

/// Gradient of `<upstream, conv2d(input, bank)>` with respect to the bank weights.
pub fn conv2d_kernel_grad(
    input: &Grid3,
    upstream: &Grid3,
    bank: &KernelBank,
    stride: usize,
) -> Result<KernelBank> {
    check_bank(input.shape(), bank, stride)?;
    let expected = bank.output_shape(input.shape(), stride);
    if upstream.shape() != expected {
        return Err(Error::Shape(format!(
            "kernel gradient expects upstream {expected}, got {}",
            upstream.shape()
        )));
    }
    let taps = Taps::new(input.height(), input.width(), bank.size, stride);
    let mut grad = KernelBank::zeros(bank.out_channels, bank.in_channels, bank.size);
    for o in 0..bank.out_channels {
        for c in 0..bank.in_channels {
            taps.kernel_grad(input.plane(c), upstream.plane(o), grad.kernel_mut(o, c));
        }
    }
    Ok(grad)
}

/// Single-plane stride-1 filtering of a flat `height x width` buffer.
pub fn filter_plane(plane: &[f64], height: usize, width: usize, kernel: &KernelSpec) -> Vec<f64> {
    let taps = Taps::new(height, width, kernel.taps.height(), 1);
    let mut out = vec![0.0; height * width];
    taps.correlate(plane, kernel.taps.data(), &mut out);
    out
}

/// Transpose of [`filter_plane`].
pub fn filter_plane_adjoint(
    upstream: &[f64],
    height: usize,
    width: usize,
    kernel: &KernelSpec,
) -> Vec<f64> {
    let taps = Taps::new(height, width, kernel.taps.height(), 1);
    let mut out = vec![0.0; height * width];
    taps.correlate_adjoint(upstream, kernel.taps.data(), &mut out);
    out
}

/// `<upstream, filter_plane(plane, k)>` differentiated with respect to the taps of `k`,
/// then contracted against `dk` (a tap-wise derivative of the kernel).
pub fn filter_plane_tangent(
    plane: &[f64],
    upstream: &[f64],
    height: usize,
    width: usize,
    dk: &KernelSpec,
) -> f64 {
    let size = dk.taps.height();
    let taps = Taps::new(height, width, size, 1);
    let mut g = vec![0.0; size * size];
    taps.kernel_grad(plane, upstream, &mut g);
    dot(&g, dk.taps.data())
}

/// Deterministic standard-normal stream.
///
/// Uniforms come from ChaCha8 (`rand_chacha`, seeded with `seed_from_u64`),
/// mapped to `(0, 1]` as `((u64 >> 11) + 1) * 2^-53`, and paired through the
/// Box-Muller transform: `sqrt(-2 ln u1) * (cos 2πu2, sin 2πu2)`.
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * t.sin());
        r * t.cos()
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_normal();
        }
    }
}

/// Seeded standard-normal grid of the given shape.
pub fn gaussian_noise(seed: u64, shape: Shape) -> Grid3 {
    let mut g = Grid3::zeros(shape);
    NormalStream::new(seed).fill(g.data_mut());
    g
}

pub fn gaussian_noise2(seed: u64, height: usize, width: usize) -> Grid2 {
    let mut g = Grid2::zeros(height, width);
    NormalStream::new(seed).fill(g.data_mut());
    g
}

/// Derive an independent stream seed from a master seed and an index path.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    // splitmix64 finalizer folded over the path
    let mut h = master ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        h = h.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        h ^= h >> 30;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Grid2 {
        Grid2::from_fn(h, w, |i, j| (i * w + j) as f64)
    }

    #[test]
    fn gaussian_sums_to_one() {
        for sigma in [0.5, 1.0, 2.3] {
            let k = gaussian_kernel(sigma).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-12, "sigma {sigma}");
            let peak = k.taps().data().iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(k.center(), peak);
        }
    }

    #[test]
    fn gaussian_center_tap_matches_brute_force() {
        let k = gaussian_kernel(1.0).unwrap();
        assert_eq!(k.radius(), 4);
        let mut z = 0.0;
        for i in -4i32..=4 {
            for j in -4i32..=4 {
                z += (-((i * i + j * j) as f64) / 2.0).exp();
            }
        }
        assert!((k.center() - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn gaussian_symmetries() {
        let k = gaussian_kernel(1.7).unwrap();
        let t = k.taps();
        let n = t.height();
        for i in 0..n {
            for j in 0..n {
                let v = t.get(i, j);
                assert_eq!(v, t.get(j, i));
                assert_eq!(v, t.get(n - 1 - i, j));
                assert_eq!(v, t.get(i, n - 1 - j));
            }
        }
    }

    #[test]
    fn gaussian_rejects_bad_sigma() {
        for s in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(gaussian_kernel(s), Err(Error::ParamDomain(_))));
        }
    }

    #[test]
    fn gaussian_sigma_derivative_matches_finite_difference() {
        let sigma = 1.3;
        let h = 1e-6;
        let (_, d) = gaussian_with_derivative(sigma).unwrap();
        let kp = gaussian_kernel(sigma + h).unwrap();
        let km = gaussian_kernel(sigma - h).unwrap();
        for idx in 0..d.taps().len() {
            let fd = (kp.taps().data()[idx] - km.taps().data()[idx]) / (2.0 * h);
            assert!((fd - d.taps().data()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn dog_is_zero_sum_with_center_surround_signs() {
        let k = dog_kernel(0.5, 1.5).unwrap();
        assert!(k.sum().abs() < 1e-12);
        assert!(k.center() > 0.0);
        let n = k.taps().height();
        assert!(k.taps().get(0, n / 2) < 0.0);
        assert!(k.taps().get(n / 2, n - 1) < 0.0);
    }

    #[test]
    fn dog_rejects_inverted_scales() {
        assert!(matches!(dog_kernel(1.5, 1.5), Err(Error::ParamDomain(_))));
        assert!(matches!(dog_kernel(2.0, 1.0), Err(Error::ParamDomain(_))));
    }

    #[test]
    fn dog_annihilates_constants() {
        let k = dog_kernel(0.7, 2.1).unwrap();
        let img = Grid2::filled(12, 9, 0.37);
        let out = filter_plane(img.data(), 12, 9, &k);
        assert!(out.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn dog_impulse_response_is_the_kernel() {
        let k = dog_kernel(0.5, 1.5).unwrap();
        let n = 21;
        let mut img = Grid2::zeros(n, n);
        img.set(n / 2, n / 2, 1.0);
        let out = filter_plane(img.data(), n, n, &k);
        let r = k.radius();
        for a in 0..k.taps().height() {
            for b in 0..k.taps().width() {
                let got = out[(n / 2 - r + a) * n + (n / 2 - r + b)];
                assert_eq!(got, k.taps().get(a, b));
            }
        }
    }

    #[test]
    fn gaussian_preserves_constants() {
        let k = gaussian_kernel(1.2).unwrap();
        let out = filter_plane(&[0.8; 100], 10, 10, &k);
        assert!(out.iter().all(|v| (v - 0.8).abs() < 1e-12));
    }

    #[test]
    fn reflect_matches_mirror_without_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-7, 2), 1);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn identity_kernel_is_bit_exact() {
        let img = ramp(7, 5).map(|v| v.sin());
        let bank = KernelBank::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let out = conv2d(&img.to_grid3(), &bank, 1).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn box_filter_matches_nested_loop_oracle() {
        let img = ramp(8, 8);
        let bank = KernelBank::from_vec(1, 1, 3, vec![1.0; 9]).unwrap();
        let out = conv2d(&img.to_grid3(), &bank, 1).unwrap();
        let mirror = |i: i64| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i > 7 {
                (14 - i) as usize
            } else {
                i as usize
            }
        };
        for i in 0..8i64 {
            for j in 0..8i64 {
                let mut s = 0.0;
                for a in -1..=1 {
                    for b in -1..=1 {
                        s += img.get(mirror(i + a), mirror(j + b));
                    }
                }
                assert_eq!(out.data()[(i * 8 + j) as usize], s);
            }
        }
    }

    #[test]
    fn stride_two_output_dims() {
        let img = Grid3::zeros(Shape::plane(17, 17));
        let bank = KernelBank::zeros(3, 1, 5);
        let out = conv2d(&img, &bank, 2).unwrap();
        assert_eq!(out.shape(), Shape::new(3, 9, 9));
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let img = Grid3::zeros(Shape::new(2, 4, 4));
        let bank = KernelBank::zeros(1, 3, 3);
        assert!(matches!(conv2d(&img, &bank, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_adjoint_identity_and_kernel_grad() {
        let shape = Shape::new(2, 9, 7);
        let x = gaussian_noise(1, shape);
        let mut bank = KernelBank::zeros(3, 2, 5);
        NormalStream::new(2).fill(&mut bank.weights);
        let y = conv2d(&x, &bank, 2).unwrap();
        let u = gaussian_noise(3, y.shape());
        let lhs = u.dot(&y);
        let xt = conv2d_adjoint(&u, &bank, 2, shape).unwrap();
        let rhs = xt.dot(&x);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        // y is linear in the weights too
        let g = conv2d_kernel_grad(&x, &u, &bank, 2).unwrap();
        let rhs_k = dot(&g.weights, &bank.weights);
        assert!((lhs - rhs_k).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn noise_is_deterministic_and_seed_dependent() {
        let a = gaussian_noise(42, Shape::new(2, 3, 5));
        let b = gaussian_noise(42, Shape::new(2, 3, 5));
        let c = gaussian_noise(43, Shape::new(2, 3, 5));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_moments() {
        let g = gaussian_noise2(7, 1000, 1000);
        let n = g.len() as f64;
        let mean = g.data().iter().sum::<f64>() / n;
        let var = g.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn below_is_in_range() {
        let mut s = NormalStream::new(9);
        for n in [1, 2, 7, 1000] {
            for _ in 0..100 {
                assert!(s.below(n) < n);
            }
        }
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let mut v = v;
            prop_assume!(l2_norm(&v) > 1e-9);
            normalize(&mut v);
            prop_assert!((l2_norm(&v) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cauchy_schwarz(a in prop::collection::vec(-10.0f64..10.0, 16), b in prop::collection::vec(-10.0f64..10.0, 16)) {
            prop_assert!(dot(&a, &b).abs() <= l2_norm(&a) * l2_norm(&b) * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn conv_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let shape = Shape::new(2, 6, 5);
            let u = gaussian_noise(seed, shape);
            let v = gaussian_noise(seed + 1000, shape);
            let mut bank = KernelBank::zeros(2, 2, 3);
            NormalStream::new(seed + 2000).fill(&mut bank.weights);
            let mix = u.scaled(a).add_scaled(b, &v);
            let lhs = conv2d(&mix, &bank, 1).unwrap();
            let rhs = conv2d(&u, &bank, 1).unwrap().scaled(a)
                .add_scaled(b, &conv2d(&v, &bank, 1).unwrap());
            let err = lhs.add_scaled(-1.0, &rhs).norm();
            prop_assert!(err <= 1e-10 * rhs.norm().max(1.0));
        }
    }
}
