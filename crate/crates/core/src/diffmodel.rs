//! Differentiable models as chains of stages with hand-written derivatives.
//!
//! A [`Stage`] maps a [`Grid3`] to a [`Grid3`] and supplies its own
//! Jacobian-vector product, vector-Jacobian product and parameter gradient.
//! [`ModelChain`] composes stages by the chain rule. Stages must be smooth
//! everywhere; a stage with kinks has no place in a chain.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::{Grid2, Grid3, Shape};

pub trait Stage: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Output shape for a given input shape, or a shape error.
    fn output_shape(&self, input: Shape) -> Result<Shape>;

    fn forward(&self, x: &Grid3) -> Grid3;

    /// `(∂stage/∂x)(x) · v`
    fn jvp(&self, x: &Grid3, v: &Grid3) -> Grid3;

    /// `(∂stage/∂x)(x)ᵀ · u`
    fn vjp(&self, x: &Grid3, u: &Grid3) -> Grid3;

    fn param_count(&self) -> usize {
        0
    }

    /// `(∂stage/∂params)(x)ᵀ · u`, in the stage's parameter order.
    fn param_vjp(&self, _x: &Grid3, _u: &Grid3) -> Vec<f64> {
        Vec::new()
    }
}

/// An immutable composition of stages with validated shapes.
#[derive(Debug, Clone)]
pub struct ModelChain {
    stages: Vec<Arc<dyn Stage>>,
    shapes: Vec<Shape>,
}

impl ModelChain {
    /// Build a chain for `height x width` single-channel inputs.
    pub fn new(height: usize, width: usize, stages: Vec<Arc<dyn Stage>>) -> Result<Self> {
        let mut shapes = vec![Shape::plane(height, width)];
        for s in &stages {
            let next = s.output_shape(*shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(Self { stages, shapes })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::new(height, width, Vec::new()).expect("identity chain")
    }

    pub fn stages(&self) -> &[Arc<dyn Stage>] {
        &self.stages
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().expect("non-empty")
    }

    /// Dimension of the image space, N.
    pub fn input_len(&self) -> usize {
        self.input_shape().len()
    }

    /// Dimension of the response space, M.
    pub fn output_len(&self) -> usize {
        self.output_shape().len()
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(|s| s.param_count()).sum()
    }

    fn check_image(&self, x: &Grid2, what: &str) -> Result<()> {
        let s = self.input_shape();
        if x.dims() != (s.height, s.width) {
            return Err(Error::Shape(format!(
                "{what} is {}x{}, model expects {}x{}",
                x.height(),
                x.width(),
                s.height,
                s.width
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Grid2) -> Result<()> {
        self.check_image(x, "input")?;
        if !x.is_finite() {
            return Err(Error::InputDomain("input image has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Grid2) -> Result<Grid3> {
        self.check_input(x)?;
        let mut cur = x.to_grid3();
        for s in &self.stages {
            cur = s.forward(&cur);
        }
        Ok(cur)
    }

    /// Cache every intermediate point so repeated JVP/VJP calls skip the forward pass.
    pub fn linearize(&self, x: &Grid2) -> Result<Linearization<'_>> {
        self.check_input(x)?;
        let mut points = Vec::with_capacity(self.stages.len() + 1);
        points.push(x.to_grid3());
        for s in &self.stages {
            let next = s.forward(points.last().expect("non-empty"));
            points.push(next);
        }
        Ok(Linearization {
            chain: self,
            points,
        })
    }

    pub fn jvp(&self, x: &Grid2, v: &Grid2) -> Result<Grid3> {
        self.linearize(x)?.jvp(v)
    }

    pub fn vjp(&self, x: &Grid2, u: &Grid3) -> Result<Grid2> {
        self.linearize(x)?.vjp(u)
    }

    pub fn param_vjp(&self, x: &Grid2, u: &Grid3) -> Result<Vec<f64>> {
        self.linearize(x)?.param_vjp(u)
    }
}

/// A chain evaluated at a fixed point `x`.
#[derive(Debug)]
pub struct Linearization<'a> {
    chain: &'a ModelChain,
    points: Vec<Grid3>,
}

impl Linearization<'_> {
    pub fn chain(&self) -> &ModelChain {
        self.chain
    }

    /// Input followed by every stage output, in chain order.
    pub fn points(&self) -> &[Grid3] {
        &self.points
    }

    pub fn output(&self) -> &Grid3 {
        self.points.last().expect("non-empty")
    }

    pub fn jvp(&self, v: &Grid2) -> Result<Grid3> {
        self.chain.check_image(v, "tangent")?;
        let mut t = v.to_grid3();
        for (s, p) in self.chain.stages.iter().zip(&self.points) {
            t = s.jvp(p, &t);
        }
        Ok(t)
    }

    pub fn vjp(&self, u: &Grid3) -> Result<Grid2> {
        Ok(self.backward(u, false)?.0)
    }

    pub fn param_vjp(&self, u: &Grid3) -> Result<Vec<f64>> {
        Ok(self.backward(u, true)?.1)
    }

    fn backward(&self, u: &Grid3, params: bool) -> Result<(Grid2, Vec<f64>)> {
        if u.shape() != self.chain.output_shape() {
            return Err(Error::Shape(format!(
                "cotangent is {}, model output is {}",
                u.shape(),
                self.chain.output_shape()
            )));
        }
        let mut ct = u.clone();
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for (s, p) in self.chain.stages.iter().zip(&self.points).rev() {
            if params {
                grads.push(s.param_vjp(p, &ct));
            }
            ct = s.vjp(p, &ct);
        }
        grads.reverse();
        Ok((ct.into_grid2()?, grads.concat()))
    }
}

/// Default central-difference step: `1e-4 * max(1, ||x||_inf)`.
pub fn default_fd_step(x: &Grid2) -> f64 {
    1e-4 * x.max_abs().max(1.0)
}

pub const DENSE_JACOBIAN_LIMIT: usize = 4096;

/// Dense `M x N` Jacobian by central differences, one input pixel per column.
pub fn dense_jacobian_fd(chain: &ModelChain, x: &Grid2, h: Option<f64>) -> Result<Matrix> {
    let n = chain.input_len();
    if n > DENSE_JACOBIAN_LIMIT {
        return Err(Error::Size(format!(
            "dense Jacobian needs N <= {DENSE_JACOBIAN_LIMIT}, got {n}"
        )));
    }
    chain.check_input(x)?;
    let h = h.unwrap_or_else(|| default_fd_step(x));
    let m = chain.output_len();
    let mut jac = Matrix::zeros(m, n);
    let mut xp = x.clone();
    for j in 0..n {
        let orig = xp.data()[j];
        xp.data_mut()[j] = orig + h;
        let fp = chain.forward(&xp)?;
        xp.data_mut()[j] = orig - h;
        let fm = chain.forward(&xp)?;
        xp.data_mut()[j] = orig;
        let col: Vec<f64> = fp
            .data()
            .iter()
            .zip(fm.data())
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Central difference of the forward map along `v`.
pub fn directional_fd(chain: &ModelChain, x: &Grid2, v: &Grid2, h: f64) -> Result<Grid3> {
    let fp = chain.forward(&x.add_scaled(h, v))?;
    let fm = chain.forward(&x.add_scaled(-h, v))?;
    Ok(fp.add_scaled(-1.0, &fm).scaled(0.5 / h))
}

/// Multiply every entry by a constant.
#[derive(Debug, Clone)]
pub struct Scale(pub f64);

impl Stage for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(input)
    }

    fn forward(&self, x: &Grid3) -> Grid3 {
        x.scaled(self.0)
    }

    fn jvp(&self, _x: &Grid3, v: &Grid3) -> Grid3 {
        v.scaled(self.0)
    }

    fn vjp(&self, _x: &Grid3, u: &Grid3) -> Grid3 {
        u.scaled(self.0)
    }
}

/// Arbitrary dense linear map on the flattened grid.
#[derive(Debug, Clone)]
pub struct DenseLinear {
    matrix: Matrix,
    output: Shape,
}

impl DenseLinear {
    pub fn new(matrix: Matrix, output: Shape) -> Result<Self> {
        if matrix.rows() != output.len() {
            return Err(Error::Shape(format!(
                "matrix has {} rows for output {output}",
                matrix.rows()
            )));
        }
        Ok(Self { matrix, output })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

impl Stage for DenseLinear {
    fn name(&self) -> &'static str {
        "dense-linear"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.len() != self.matrix.cols() {
            return Err(Error::Shape(format!(
                "matrix has {} columns for input {input}",
                self.matrix.cols()
            )));
        }
        Ok(self.output)
    }

    fn forward(&self, x: &Grid3) -> Grid3 {
        Grid3::from_vec(self.output, self.matrix.mul_vec(x.data())).expect("validated")
    }

    fn jvp(&self, _x: &Grid3, v: &Grid3) -> Grid3 {
        self.forward(v)
    }

    fn vjp(&self, x: &Grid3, u: &Grid3) -> Grid3 {
        Grid3::from_vec(x.shape(), self.matrix.tr_mul_vec(u.data())).expect("validated")
    }
}
