//! Stages used by the zoo models.

use crate::diffmodel::Stage;
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_adjoint, conv2d_kernel_grad, dog_kernel, filter_plane, filter_plane_adjoint,
    filter_plane_tangent, gaussian_with_derivative, Grid3, KernelBank, KernelSpec, Shape,
};

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`], `1 / (1 + exp(-x))`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] on `(0, inf)`.
pub fn softplus_inv(y: f64) -> f64 {
    // log(exp(y) - 1) = y + log(1 - exp(-y))
    y + (-(-y).exp_m1()).ln()
}

#[derive(Debug, Clone, Default)]
pub struct Softplus;

impl Stage for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(input)
    }

    fn forward(&self, x: &Grid3) -> Grid3 {
        x.map(softplus)
    }

    fn jvp(&self, x: &Grid3, v: &Grid3) -> Grid3 {
        let mut out = v.clone();
        for (o, xi) in out.data_mut().iter_mut().zip(x.data()) {
            *o *= sigmoid(*xi);
        }
        out
    }

    fn vjp(&self, x: &Grid3, u: &Grid3) -> Grid3 {
        self.jvp(x, u)
    }
}

#[derive(Debug, Clone)]
struct GaussianPair {
    kernel: KernelSpec,
    dsigma: KernelSpec,
}

impl GaussianPair {
    fn new(sigma: f64) -> Result<Self> {
        let (kernel, dsigma) = gaussian_with_derivative(sigma)?;
        Ok(Self { kernel, dsigma })
    }
}

#[derive(Debug, Clone)]
struct DogChannel {
    sign: f64,
    kernel: KernelSpec,
    center: GaussianPair,
    surround: GaussianPair,
}

/// Signed difference-of-Gaussians filters applied to a single-channel image,
/// optionally passing the image through as a trailing channel for later
/// luminance gain control.
#[derive(Debug, Clone)]
pub struct DogStage {
    channels: Vec<DogChannel>,
    passthrough: bool,
}

impl DogStage {
    /// `channels` holds `(sigma_center, sigma_surround, sign)` per output channel.
    pub fn new(channels: &[(f64, f64, f64)], passthrough: bool) -> Result<Self> {
        let channels = channels
            .iter()
            .map(|&(sc, ss, sign)| {
                let kernel = dog_kernel(sc, ss)?;
                let kernel = if sign < 0.0 { kernel.negated() } else { kernel };
                Ok(DogChannel {
                    sign: sign.signum(),
                    kernel,
                    center: GaussianPair::new(sc)?,
                    surround: GaussianPair::new(ss)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            channels,
            passthrough,
        })
    }

    fn out_channels(&self) -> usize {
        self.channels.len() + usize::from(self.passthrough)
    }

    fn apply(&self, x: &Grid3) -> Grid3 {
        let (h, w) = (x.height(), x.width());
        let src = x.plane(0);
        let mut planes: Vec<Vec<f64>> = self
            .channels
            .iter()
            .map(|c| filter_plane(src, h, w, &c.kernel))
            .collect();
        if self.passthrough {
            planes.push(src.to_vec());
        }
        Grid3::from_planes(h, w, planes).expect("consistent planes")
    }
}

impl Stage for DogStage {
    fn name(&self) -> &'static str {
        "dog"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != 1 {
            return Err(Error::Shape(format!(
                "DoG stage takes one channel, got {}",
                input.channels
            )));
        }
        Ok(Shape::new(self.out_channels(), input.height, input.width))
    }

    fn forward(&self, x: &Grid3) -> Grid3 {
        self.apply(x)
    }

    fn jvp(&self, _x: &Grid3, v: &Grid3) -> Grid3 {
        self.apply(v)
    }

    fn vjp(&self, x: &Grid3, u: &Grid3) -> Grid3 {
        let (h, w) = (x.height(), x.width());
        let mut grad = vec![0.0; h * w];
        for (k, c) in self.channels.iter().enumerate() {
            let g = filter_plane_adjoint(u.plane(k), h, w, &c.kernel);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        if self.passthrough {
            for (a, b) in grad.iter_mut().zip(u.plane(self.channels.len())) {
                *a += b;
            }
        }
        Grid3::from_vec(x.shape(), grad).expect("input shape")
    }

    fn param_count(&self) -> usize {
        2 * self.channels.len()
    }

    fn param_vjp(&self, x: &Grid3, u: &Grid3) -> Vec<f64> {
        let (h, w) = (x.height(), x.width());
        let src = x.plane(0);
        let mut out = Vec::with_capacity(self.param_count());
        for (k, c) in self.channels.iter().enumerate() {
            let uk = u.plane(k);
            out.push(c.sign * filter_plane_tangent(src, uk, h, w, &c.center.dsigma));
            out.push(-c.sign * filter_plane_tangent(src, uk, h, w, &c.surround.dsigma));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct GainChannel {
    amplitude: f64,
    blur: GaussianPair,
}

fn gain_channels(params: &[(f64, f64)]) -> Result<Vec<GainChannel>> {
    params
        .iter()
        .map(|&(amplitude, sigma)| {
            if !(amplitude.is_finite() && amplitude >= 0.0) {
                return Err(Error::ParamDomain(format!(
                    "gain amplitude must be finite and non-negative, got {amplitude}"
                )));
            }
            Ok(GainChannel {
                amplitude,
                blur: GaussianPair::new(sigma)?,
            })
        })
        .collect()
}

/// Divide each filter channel by `1 + a * (G_sigma * x)`, where `x` is the
/// luminance image carried in the last input channel.
#[derive(Debug, Clone)]
pub struct LuminanceGain {
    channels: Vec<GainChannel>,
}

impl LuminanceGain {
    /// `params` holds `(amplitude, sigma)` per filter channel.
    pub fn new(params: &[(f64, f64)]) -> Result<Self> {
        Ok(Self {
            channels: gain_channels(params)?,
        })
    }

    /// Per-channel blurred luminance and denominators.
    fn denominators(&self, x: &Grid3) -> Vec<(Vec<f64>, Vec<f64>)> {
        let (h, w) = (x.height(), x.width());
        let lum = x.plane(self.channels.len());
        self.channels
            .iter()
            .map(|c| {
                let b = filter_plane(lum, h, w, &c.blur.kernel);
                let d: Vec<f64> = b.iter().map(|bi| 1.0 + c.amplitude * bi).collect();
                (b, d)
            })
            .collect()
    }
}

impl Stage for LuminanceGain {
    fn name(&self) -> &'static str {
        "luminance-gain"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.channels.len() + 1 {
            return Err(Error::Shape(format!(
                "luminance gain expects {} filter channels plus luminance, got {} channels",
                self.channels.len(),
                input.channels
            )));
        }
        Ok(Shape::new(self.channels.len(), input.height, input.width))
    }

    fn forward(&self, x: &Grid3) -> Grid3 {
        let dens = self.denominators(x);
        let lum_nonneg = x.plane(self.channels.len()).iter().all(|v| *v >= 0.0);
        let planes = dens
            .iter()
            .enumerate()
            .map(|(k, (_, d))| {
                debug_assert!(!lum_nonneg || d.iter().all(|di| *di >= 1.0 - 1e-12));
                x.plane(k).iter().zip(d).map(|(v, di)| v / di).collect()
            })
            .collect();
        Grid3::from_planes(x.height(), x.width(), planes).expect("consistent planes")
    }

    fn jvp(&self, x: &Grid3, t: &Grid3) -> Grid3 {
        let (h, w) = (x.height(), x.width());
        let dens = self.denominators(x);
        let dlum = t.plane(self.channels.len());
        let planes = self
            .channels
            .iter()
            .zip(&dens)
            .enumerate()
            .map(|(k, (c, (_, d)))| {
                let db = filter_plane(dlum, h, w, &c.blur.kernel);
                let v = x.plane(k);
                let dv = t.plane(k);
                (0..h * w)
                    .map(|i| dv[i] / d[i] - v[i] * c.amplitude * db[i] / (d[i] * d[i]))
                    .collect()
            })
            .collect();
        Grid3::from_planes(h, w, planes).expect("consistent planes")
    }

    fn vjp(&self, x: &Grid3, u: &Grid3) -> Grid3 {
        let (h, w) = (x.height(), x.width());
        let k_lum = self.channels.len();
        let dens = self.denominators(x);
        let mut grad = Grid3::zeros(x.shape());
        let mut lum_grad = vec![0.0; h * w];
        for (k, (c, (_, d))) in self.channels.iter().zip(&dens).enumerate() {
            let v = x.plane(k);
            let uk = u.plane(k);
            let gv = grad.plane_mut(k);
            let mut through_blur = vec![0.0; h * w];
            for i in 0..h * w {
                gv[i] = uk[i] / d[i];
                through_blur[i] = -c.amplitude * uk[i] * v[i] / (d[i] * d[i]);
            }
            let g = filter_plane_adjoint(&through_blur, h, w, &c.blur.kernel);
            for (a, b) in lum_grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        grad.plane_mut(k_lum).copy_from_slice(&lum_grad);
        grad
    }

    fn param_count(&self) -> usize {
        2 * self.channels.len()
    }

    fn param_vjp(&self, x: &Grid3, u: &Grid3) -> Vec<f64> {
        let (h, w) = (x.height(), x.width());
        let lum = x.plane(self.channels.len());
        let dens = self.denominators(x);
        let mut out = Vec::with_capacity(self.param_count());
        for (k, (c, (b, d))) in self.channels.iter().zip(&dens).enumerate() {
            let v = x.plane(k);
            let uk = u.plane(k);
            // d/d(blurred luminance) of the channel output, weighted by u
            let g: Vec<f64> = (0..h * w)
                .map(|i| -uk[i] * v[i] / (d[i] * d[i]))
                .collect();
            let da: f64 = g.iter().zip(b).fold(0.0, |acc, (gi, bi)| acc + gi * bi);
            let ds = c.amplitude * filter_plane_tangent(lum, &g, h, w, &c.blur.dsigma);
            out.push(da);
            out.push(ds);
        }
        out
    }
}

/// Offset inside the local-contrast square root; keeps the derivative finite
/// where the local contrast is exactly zero.
pub const CONTRAST_EPS: f64 = 1e-8;

/// Divide each channel by `1 + a * sqrt(G_sigma * w² + eps)`.
#[derive(Debug, Clone)]
pub struct ContrastGain {
    channels: Vec<GainChannel>,
}

struct ContrastTerms {
    sq: Vec<f64>,
    q: Vec<f64>,
    d: Vec<f64>,
}

impl ContrastGain {
    pub fn new(params: &[(f64, f64)]) -> Result<Self> {
        Ok(Self {
            channels: gain_channels(params)?,
        })
    }

    fn terms(&self, x: &Grid3) -> Vec<ContrastTerms> {
        let (h, w) = (x.height(), x.width());
        self.channels
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let sq: Vec<f64> = x.plane(k).iter().map(|v| v * v).collect();
                let s = filter_plane(&sq, h, w, &c.blur.kernel);
                let q: Vec<f64> = s.iter().map(|si| (si + CONTRAST_EPS).sqrt()).collect();
                let d = q.iter().map(|qi| 1.0 + c.amplitude * qi).collect();
                ContrastTerms { sq, q, d }
            })
            .collect()
    }
}

impl Stage for ContrastGain {
    fn name(&self) -> &'static str {
        "contrast-gain"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.channels.len() {
            return Err(Error::Shape(format!(
                "contrast gain expects {} channels, got {}",
                self.channels.len(),
                input.channels
            )));
        }
        Ok(input)
    }

    fn forward(&self, x: &Grid3) -> Grid3 {
        let planes = self
            .terms(x)
            .iter()
            .enumerate()
            .map(|(k, t)| {
                debug_assert!(t.d.iter().all(|di| *di >= 1.0));
                x.plane(k).iter().zip(&t.d).map(|(v, di)| v / di).collect()
            })
            .collect();
        Grid3::from_planes(x.height(), x.width(), planes).expect("consistent planes")
    }

    fn jvp(&self, x: &Grid3, t: &Grid3) -> Grid3 {
        let (h, w) = (x.height(), x.width());
        let planes = self
            .channels
            .iter()
            .zip(self.terms(x))
            .enumerate()
            .map(|(k, (c, tm))| {
                let v = x.plane(k);
                let dv = t.plane(k);
                let prod: Vec<f64> = v.iter().zip(dv).map(|(a, b)| a * b).collect();
                let ds = filter_plane(&prod, h, w, &c.blur.kernel);
                (0..h * w)
                    .map(|i| {
                        let dq = ds[i] / tm.q[i];
                        dv[i] / tm.d[i] - v[i] * c.amplitude * dq / (tm.d[i] * tm.d[i])
                    })
                    .collect()
            })
            .collect();
        Grid3::from_planes(h, w, planes).expect("consistent planes")
    }

    fn vjp(&self, x: &Grid3, u: &Grid3) -> Grid3 {
        let (h, w) = (x.height(), x.width());
        let mut grad = Grid3::zeros(x.shape());
        for (k, (c, tm)) in self.channels.iter().zip(self.terms(x)).enumerate() {
            let v = x.plane(k);
            let uk = u.plane(k);
            let tq: Vec<f64> = (0..h * w)
                .map(|i| -uk[i] * v[i] * c.amplitude / (tm.d[i] * tm.d[i]) / tm.q[i])
                .collect();
            let back = filter_plane_adjoint(&tq, h, w, &c.blur.kernel);
            let gk = grad.plane_mut(k);
            for i in 0..h * w {
                gk[i] = uk[i] / tm.d[i] + v[i] * back[i];
            }
        }
        grad
    }

    fn param_count(&self) -> usize {
        2 * self.channels.len()
    }

    fn param_vjp(&self, x: &Grid3, u: &Grid3) -> Vec<f64> {
        let (h, w) = (x.height(), x.width());
        let mut out = Vec::with_capacity(self.param_count());
        for (k, (c, tm)) in self.channels.iter().zip(self.terms(x)).enumerate() {
            let v = x.plane(k);
            let uk = u.plane(k);
            // dL/dq per pixel
            let tq: Vec<f64> = (0..h * w)
                .map(|i| -uk[i] * v[i] * c.amplitude / (tm.d[i] * tm.d[i]))
                .collect();
            let da: f64 = (0..h * w)
                .map(|i| -uk[i] * v[i] * tm.q[i] / (tm.d[i] * tm.d[i]))
                .sum();
            let ts: Vec<f64> = tq.iter().zip(&tm.q).map(|(t, q)| t / (2.0 * q)).collect();
            let ds = filter_plane_tangent(&tm.sq, &ts, h, w, &c.blur.dsigma);
            out.push(da);
            out.push(ds);
        }
        out
    }
}

/// Strided convolution followed by division by a frozen normalization constant.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    bank: KernelBank,
    stride: usize,
    divisor: f64,
}

impl ConvLayer {
    pub fn new(bank: KernelBank, stride: usize, divisor: f64) -> Result<Self> {
        if !(divisor.is_finite() && divisor > 0.0) {
            return Err(Error::ParamDomain(format!(
                "normalization divisor must be positive, got {divisor}"
            )));
        }
        if stride == 0 {
            return Err(Error::ParamDomain("stride must be at least 1".into()));
        }
        Ok(Self {
            bank,
            stride,
            divisor,
        })
    }

    pub fn bank(&self) -> &KernelBank {
        &self.bank
    }

    pub fn divisor(&self) -> f64 {
        self.divisor
    }

    /// Convolution output before the divisor is applied.
    pub fn raw(&self, x: &Grid3) -> Grid3 {
        conv2d(x, &self.bank, self.stride).expect("validated shape")
    }
}

impl Stage for ConvLayer {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.bank.in_channels {
            return Err(Error::Shape(format!(
                "conv layer expects {} channels, got {}",
                self.bank.in_channels, input.channels
            )));
        }
        Ok(self.bank.output_shape(input, self.stride))
    }

    fn forward(&self, x: &Grid3) -> Grid3 {
        self.raw(x).scaled(1.0 / self.divisor)
    }

    fn jvp(&self, _x: &Grid3, v: &Grid3) -> Grid3 {
        self.forward(v)
    }

    fn vjp(&self, x: &Grid3, u: &Grid3) -> Grid3 {
        conv2d_adjoint(u, &self.bank, self.stride, x.shape())
            .expect("validated shape")
            .scaled(1.0 / self.divisor)
    }

    fn param_count(&self) -> usize {
        self.bank.weights.len()
    }

    fn param_vjp(&self, x: &Grid3, u: &Grid3) -> Vec<f64> {
        let g = conv2d_kernel_grad(x, u, &self.bank, self.stride).expect("validated shape");
        g.weights.iter().map(|v| v / self.divisor).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_noise, Grid3, NormalStream};

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        let tiny = softplus(-100.0);
        assert!(tiny > 0.0 && tiny < 1e-40 && tiny.is_finite());
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-6, 0.3, std::f64::consts::LN_2, 2.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
        assert!(softplus_inv(std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn check_stage(stage: &dyn Stage, x: &Grid3, seed: u64) {
        let out_shape = stage.output_shape(x.shape()).unwrap();
        let v = gaussian_noise(seed, x.shape());
        let u = gaussian_noise(seed + 1, out_shape);
        let jv = stage.jvp(x, &v);
        let vu = stage.vjp(x, &u);
        let lhs = u.dot(&jv);
        let rhs = vu.dot(&v);
        assert!(
            (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-3),
            "{}: adjoint {lhs} vs {rhs}",
            stage.name()
        );
        let h = 1e-5;
        let fd = stage
            .forward(&x.add_scaled(h, &v))
            .add_scaled(-1.0, &stage.forward(&x.add_scaled(-h, &v)))
            .scaled(0.5 / h);
        let err = fd.add_scaled(-1.0, &jv).norm();
        assert!(err <= 1e-6 * jv.norm().max(1e-6), "{}: fd {err}", stage.name());
    }

    fn positive_planes(channels: usize, seed: u64) -> Grid3 {
        let mut g = gaussian_noise(seed, Shape::new(channels, 9, 8));
        let n = g.shape().plane_len();
        // last plane plays luminance: keep it positive
        for v in &mut g.data_mut()[(channels - 1) * n..] {
            *v = 0.5 + 0.2 * *v;
        }
        g
    }

    #[test]
    fn stage_adjoints_and_fd() {
        let x1 = positive_planes(1, 3);
        check_stage(&Softplus, &gaussian_noise(2, Shape::new(2, 5, 4)), 10);
        check_stage(
            &DogStage::new(&[(0.7, 1.9, 1.0), (0.6, 1.4, -1.0)], true).unwrap(),
            &x1,
            20,
        );
        check_stage(
            &LuminanceGain::new(&[(0.8, 1.2), (2.0, 0.9)]).unwrap(),
            &positive_planes(3, 4),
            30,
        );
        check_stage(
            &ContrastGain::new(&[(1.5, 1.1), (0.4, 2.0)]).unwrap(),
            &gaussian_noise(5, Shape::new(2, 9, 8)),
            40,
        );
        let mut bank = KernelBank::zeros(3, 2, 5);
        NormalStream::new(6).fill(&mut bank.weights);
        check_stage(
            &ConvLayer::new(bank, 2, 1.7).unwrap(),
            &gaussian_noise(7, Shape::new(2, 9, 8)),
            50,
        );
    }

    fn check_param_grad(make: impl Fn(&[f64]) -> Box<dyn Stage>, p: &[f64], x: &Grid3) {
        let stage = make(p);
        let u = gaussian_noise(99, stage.output_shape(x.shape()).unwrap());
        let g = stage.param_vjp(x, &u);
        assert_eq!(g.len(), p.len());
        let h = 1e-6;
        for i in 0..p.len() {
            let mut pp = p.to_vec();
            pp[i] += h;
            let fp = u.dot(&make(&pp).forward(x));
            pp[i] -= 2.0 * h;
            let fm = u.dot(&make(&pp).forward(x));
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * fd.abs().max(1.0),
                "{} param {i}: fd {fd} vs {}",
                stage.name(),
                g[i]
            );
        }
    }

    #[test]
    fn stage_param_gradients() {
        check_param_grad(
            |p| Box::new(DogStage::new(&[(p[0], p[1], 1.0), (p[2], p[3], -1.0)], true).unwrap()),
            &[0.71, 1.93, 0.62, 1.41],
            &positive_planes(1, 1),
        );
        check_param_grad(
            |p| Box::new(LuminanceGain::new(&[(p[0], p[1]), (p[2], p[3])]).unwrap()),
            &[0.8, 1.13, 2.0, 0.93],
            &positive_planes(3, 2),
        );
        check_param_grad(
            |p| Box::new(ContrastGain::new(&[(p[0], p[1]), (p[2], p[3])]).unwrap()),
            &[1.5, 1.07, 0.4, 2.03],
            &gaussian_noise(3, Shape::new(2, 9, 8)),
        );
        let mut w = vec![0.0; 2 * 3 * 9];
        NormalStream::new(4).fill(&mut w);
        check_param_grad(
            |p| {
                Box::new(
                    ConvLayer::new(KernelBank::from_vec(2, 3, 3, p.to_vec()).unwrap(), 2, 1.3)
                        .unwrap(),
                )
            },
            &w,
            &gaussian_noise(5, Shape::new(3, 7, 6)),
        );
    }

    #[test]
    fn gain_rejects_negative_amplitude() {
        assert!(matches!(
            LuminanceGain::new(&[(-0.1, 1.0)]),
            Err(Error::ParamDomain(_))
        ));
        assert!(matches!(
            ContrastGain::new(&[(1.0, 0.0)]),
            Err(Error::ParamDomain(_))
        ));
    }

    #[test]
    fn conv_layer_rejects_bad_divisor() {
        assert!(ConvLayer::new(KernelBank::zeros(1, 1, 5), 2, 0.0).is_err());
    }

    #[test]
    fn dog_stage_needs_single_channel() {
        let s = DogStage::new(&[(0.5, 1.0, 1.0)], false).unwrap();
        assert!(s.output_shape(Shape::new(2, 4, 4)).is_err());
        let _ = Grid3::zeros(Shape::plane(1, 1));
    }
}
