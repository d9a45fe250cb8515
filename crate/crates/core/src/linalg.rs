//! Small dense matrices: products, a cyclic Jacobi symmetric eigensolver and
//! least squares via Householder QR. Only used for oracles and tiny systems.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| crate::tensor::dot(self.row(i), v))
            .collect()
    }

    pub fn tr_mul_vec(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, ui) in u.iter().enumerate() {
            crate::tensor::axpy(*ui, self.row(i), &mut out);
        }
        out
    }

    /// `selfᵀ self`
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let gi = &mut g.data[i * n..(i + 1) * n];
                for (gij, rj) in gi[i..].iter_mut().zip(&row[i..]) {
                    *gij += ri * rj;
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending; `vectors` column `k`
/// belongs to `values[k]`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
    pub sweeps: usize,
}

impl SymmetricEigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k)
    }
}

/// Cyclic Jacobi rotations until the off-diagonal mass is below
/// `1e-15 * ||A||_F` (or 100 sweeps).
pub fn jacobi_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let mut m = a.data.clone();
    let mut v = Matrix::identity(n).data;
    let fro: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = (1e-15 * fro).powi(2);
    let mut sweeps = 0;
    while sweeps < 100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * m[i * n + j] * m[i * n + j];
            }
        }
        if off <= target {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[k * n + src];
        }
    }
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Least-squares solution of `A x ≈ b` by Householder QR with column pivoting.
/// Returns the solution and the numerical rank; columns beyond the rank get zero.
pub fn lstsq(a: &Matrix, b: &[f64]) -> Result<(Vec<f64>, usize)> {
    let (m, n) = (a.rows, a.cols);
    if b.len() != m {
        return Err(Error::Shape(format!(
            "rhs length {} for a {m}x{n} system",
            b.len()
        )));
    }
    let mut r = a.clone();
    let mut y = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| r[(i, j)].powi(2)).sum::<f64>())
        .collect();
    let scale = norms.iter().cloned().fold(0.0, f64::max).sqrt();
    let tol = scale * 1e-12 * (m.max(n) as f64);
    let steps = m.min(n);
    let mut rank = 0;
    for k in 0..steps {
        let (p, _) = norms[k..]
            .iter()
            .enumerate()
            .fold((k, f64::MIN), |best, (i, v)| {
                if *v > best.1 {
                    (k + i, *v)
                } else {
                    best
                }
            });
        if p != k {
            perm.swap(k, p);
            norms.swap(k, p);
            for i in 0..m {
                let t = r[(i, k)];
                r[(i, k)] = r[(i, p)];
                r[(i, p)] = t;
            }
        }
        let alpha = (k..m).map(|i| r[(i, k)].powi(2)).sum::<f64>().sqrt();
        if alpha <= tol {
            break;
        }
        rank += 1;
        let sign = if r[(k, k)] >= 0.0 { 1.0 } else { -1.0 };
        let mut h: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        h[0] += sign * alpha;
        let hh: f64 = h.iter().map(|x| x * x).sum();
        for j in k..n {
            let s: f64 = (k..m).map(|i| h[i - k] * r[(i, j)]).sum::<f64>() * 2.0 / hh;
            for i in k..m {
                r[(i, j)] -= s * h[i - k];
            }
        }
        let s: f64 = (k..m).map(|i| h[i - k] * y[i]).sum::<f64>() * 2.0 / hh;
        for i in k..m {
            y[i] -= s * h[i - k];
        }
        for j in (k + 1)..n {
            norms[j] = ((k + 1)..m).map(|i| r[(i, j)].powi(2)).sum();
        }
    }
    let mut z = vec![0.0; n];
    for k in (0..rank).rev() {
        let mut s = y[k];
        for j in (k + 1)..rank {
            s -= r[(k, j)] * z[j];
        }
        z[k] = s / r[(k, k)];
    }
    let mut x = vec![0.0; n];
    for (k, &p) in perm.iter().enumerate() {
        x[p] = z[k];
    }
    Ok((x, rank))
}
