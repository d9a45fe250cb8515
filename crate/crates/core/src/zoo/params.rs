//! Smooth map between unconstrained trainable vectors and valid model parameters.

use crate::error::{Error, Result};
use crate::zoo::stages::{sigmoid, softplus, softplus_inv};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// `p = softplus(theta)`
    Positive,
    /// `p = p[anchor] + softplus(theta)`, keeping this slot above another one.
    Above(usize),
    /// `p = theta`
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTransform {
    slots: Vec<Slot>,
}

impl ParamTransform {
    pub fn new(slots: Vec<Slot>) -> Self {
        for (i, s) in slots.iter().enumerate() {
            if let Slot::Above(a) = s {
                assert!(*a < i, "anchor slot must come first");
            }
        }
        Self { slots }
    }

    pub fn free(n: usize) -> Self {
        Self {
            slots: vec![Slot::Free; n],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.slots.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {n}",
                self.slots.len()
            )));
        }
        Ok(())
    }

    pub fn constrain(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_len(theta.len())?;
        let mut p: Vec<f64> = Vec::with_capacity(theta.len());
        for (t, s) in theta.iter().zip(&self.slots) {
            let v = match *s {
                Slot::Positive => softplus(*t),
                Slot::Above(a) => p[a] + softplus(*t),
                Slot::Free => *t,
            };
            p.push(v);
        }
        Ok(p)
    }

    pub fn unconstrain(&self, params: &[f64]) -> Result<Vec<f64>> {
        self.check_len(params.len())?;
        params
            .iter()
            .zip(&self.slots)
            .enumerate()
            .map(|(i, (p, s))| {
                let excess = match *s {
                    Slot::Positive => *p,
                    Slot::Above(a) => p - params[a],
                    Slot::Free => return Ok(*p),
                };
                if !(excess.is_finite() && excess > 0.0) {
                    return Err(Error::ParamDomain(format!(
                        "parameter {i} = {p} is outside the representable region"
                    )));
                }
                Ok(softplus_inv(excess))
            })
            .collect()
    }

    /// Pull a gradient with respect to constrained parameters back to `theta`.
    pub fn pullback(&self, theta: &[f64], grad_params: &[f64]) -> Result<Vec<f64>> {
        self.check_len(theta.len())?;
        self.check_len(grad_params.len())?;
        // accumulate in reverse so anchors see their dependants' contributions
        let mut acc = grad_params.to_vec();
        let mut out = vec![0.0; theta.len()];
        for i in (0..theta.len()).rev() {
            out[i] = match self.slots[i] {
                Slot::Positive => acc[i] * sigmoid(theta[i]),
                Slot::Above(a) => {
                    acc[a] += acc[i];
                    acc[i] * sigmoid(theta[i])
                }
                Slot::Free => acc[i],
            };
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NormalStream;

    fn layout() -> ParamTransform {
        ParamTransform::new(vec![
            Slot::Positive,
            Slot::Above(0),
            Slot::Positive,
            Slot::Free,
            Slot::Above(1),
        ])
    }

    #[test]
    fn zero_theta_maps_to_log_two() {
        let p = layout().constrain(&[0.0; 5]).unwrap();
        assert!((p[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((p[1] - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(p[3], 0.0);
    }

    #[test]
    fn round_trip_is_identity() {
        let t = layout();
        let mut rng = NormalStream::new(3);
        for _ in 0..50 {
            let theta: Vec<f64> = (0..5).map(|_| 2.0 * rng.next_normal()).collect();
            let back = t.unconstrain(&t.constrain(&theta).unwrap()).unwrap();
            for (a, b) in theta.iter().zip(&back) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let t = layout();
        let theta = [0.3, -1.2, 0.8, 0.5, 0.1];
        let w = [0.7, -0.4, 1.1, 2.0, -0.9];
        let g = t.pullback(&theta, &w).unwrap();
        let f = |th: &[f64]| -> f64 {
            t.constrain(th)
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        for i in 0..5 {
            let mut tp = theta.to_vec();
            tp[i] += h;
            let mut tm = theta.to_vec();
            tm[i] -= h;
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "slot {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn unconstrain_rejects_invalid_region() {
        let t = layout();
        assert!(t.unconstrain(&[1.0, 0.5, 1.0, 0.0, 2.0]).is_err());
        assert!(t.unconstrain(&[1.0, 2.0]).is_err());
    }
}
