//! Lawson–Hanson active-set non-negative least squares.

use crate::error::{Error, Result};
use crate::linalg::{lstsq, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub weights: Vec<f64>,
    /// Largest violation of the KKT conditions at the returned point.
    pub kkt_residual: f64,
    /// A passive-set subproblem was rank deficient.
    pub rank_deficient: bool,
    pub iterations: usize,
}

/// Gradient of `½‖b − A w‖²` negated: `Aᵀ(b − A w)`.
fn descent(a: &Matrix, b: &[f64], w: &[f64]) -> Vec<f64> {
    let aw = a.mul_vec(w);
    let r: Vec<f64> = b.iter().zip(&aw).map(|(bi, ai)| bi - ai).collect();
    a.tr_mul_vec(&r)
}

/// `max(|g_j| : w_j > 0, g_j⁺ : w_j = 0, (−w_j)⁺)` with `g = Aᵀ(b − A w)`.
pub fn kkt_residual(a: &Matrix, b: &[f64], w: &[f64]) -> f64 {
    let g = descent(a, b, w);
    w.iter().zip(&g).fold(0.0_f64, |acc, (wj, gj)| {
        let v = if *wj > 0.0 { gj.abs() } else { gj.max(0.0) };
        acc.max(v).max(-wj)
    })
}

fn solve_passive(a: &Matrix, b: &[f64], passive: &[usize]) -> Result<(Vec<f64>, bool)> {
    let mut sub = Matrix::zeros(a.rows(), passive.len());
    for (k, &j) in passive.iter().enumerate() {
        sub.set_column(k, &a.column(j));
    }
    let (z, rank) = lstsq(&sub, b)?;
    let mut full = vec![0.0; a.cols()];
    for (k, &j) in passive.iter().enumerate() {
        full[j] = z[k];
    }
    Ok((full, rank < passive.len()))
}

/// Minimize `‖A w − b‖²` subject to `w ≥ 0`.
pub fn nnls(a: &Matrix, b: &[f64]) -> Result<NnlsSolution> {
    let n = a.cols();
    if b.len() != a.rows() {
        return Err(Error::Shape(format!(
            "rhs length {} for a {}x{n} system",
            b.len(),
            a.rows()
        )));
    }
    if a.data().iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InputDomain("non-finite entry in least-squares data".into()));
    }
    let scale = a.tr_mul_vec(b).iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-13 * scale;
    let mut w = vec![0.0; n];
    let mut passive = vec![false; n];
    let mut rank_deficient = false;
    let max_outer = 3 * n.max(1) + 10;
    let mut iterations = 0;
    loop {
        let g = descent(a, b, &w);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && g[j] > tol)
            .max_by(|&i, &j| g[i].total_cmp(&g[j]));
        let Some(t) = candidate else { break };
        if iterations >= max_outer {
            return Err(Error::NotConverged(format!(
                "NNLS active set did not settle after {iterations} iterations"
            )));
        }
        iterations += 1;
        passive[t] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let (z, deficient) = solve_passive(a, b, &idx)?;
            rank_deficient |= deficient;
            if idx.iter().all(|&j| z[j] > 0.0) {
                w = z;
                break;
            }
            // step back to the boundary of the feasible region
            let alpha = idx
                .iter()
                .filter(|&&j| z[j] <= 0.0)
                .map(|&j| w[j] / (w[j] - z[j]))
                .fold(f64::INFINITY, f64::min);
            for j in 0..n {
                w[j] += alpha * (z[j] - w[j]);
            }
            let wmax = w.iter().fold(0.0_f64, |m, v| m.max(*v));
            for &j in &idx {
                if w[j] <= 1e-14 * wmax {
                    passive[j] = false;
                    w[j] = 0.0;
                }
            }
            if !passive.iter().any(|p| *p) {
                break;
            }
        }
    }
    let kkt = kkt_residual(a, b, &w);
    Ok(NnlsSolution {
        weights: w,
        kkt_residual: kkt,
        rank_deficient,
        iterations,
    })
}
